import itertools
import json
import random

import pytest

from medqsum.entities import UndefinedRatio
from medqsum.evaluation import (
    MetricsReport,
    ReferenceEcho,
    entity_consistency,
    eval_tokens,
    evaluate,
    format_table,
    lcs_length,
    rouge_l,
    rouge_n,
    rouge_n_scores,
)


def f1(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def brute_rouge_n(c, r, n):
    cg = [tuple(c[i:i + n]) for i in range(len(c) - n + 1)]
    rg = [tuple(r[i:i + n]) for i in range(len(r) - n + 1)]
    if not cg or not rg:
        return 0.0
    remaining = list(rg)
    hit = 0
    for g in cg:
        if g in remaining:
            remaining.remove(g)
            hit += 1
    return f1(hit / len(cg), hit / len(rg))


def brute_lcs(a, b):
    for k in range(min(len(a), len(b)), 0, -1):
        subs_b = set(itertools.combinations(b, k))
        if any(s in subs_b for s in itertools.combinations(a, k)):
            return k
    return 0


def test_examples():
    assert rouge_n("the cat sat", "the cat ran", 1) == pytest.approx(2 / 3)
    assert rouge_n("the cat sat", "the cat ran", 2) == pytest.approx(1 / 2)
    assert rouge_l("the cat sat", "the cat ran") == pytest.approx(2 / 3)
    assert rouge_n("", "the cat", 1) == 0.0


def test_reversed_sequence():
    k = 5
    words = [f"w{i}" for i in range(k)]
    c, r = " ".join(reversed(words)), " ".join(words)
    assert rouge_n(c, r, 1) == 1.0
    assert rouge_n(c, r, 2) == 0.0
    assert rouge_l(c, r) == pytest.approx(1 / k)


def test_clipped_counts():
    p, r, _ = rouge_n_scores("the the the", "the cat", 1)
    assert (p, r) == (pytest.approx(1 / 3), 0.5)


def test_tokenization():
    assert eval_tokens("What's GOUT?  (e.g. flare_up)") == ["what", "s", "gout", "e", "g", "flare", "up"]


@pytest.mark.parametrize("seed", range(20))
def test_random_sequences_against_brute_force(seed):
    g = random.Random(seed)
    vocab = ["a", "b", "c", "d"]
    c = [g.choice(vocab) for _ in range(g.randint(0, 8))]
    r = [g.choice(vocab) for _ in range(g.randint(1, 8))]
    cs, rs = " ".join(c), " ".join(r)
    for n in (1, 2):
        assert rouge_n(cs, rs, n) == pytest.approx(brute_rouge_n(c, r, n), abs=1e-15)
    assert lcs_length(c, r) == brute_lcs(c, r)
    expected_l = f1(brute_lcs(c, r) / len(c), brute_lcs(c, r) / len(r)) if c else 0.0
    assert rouge_l(cs, rs) == pytest.approx(expected_l, abs=1e-15)


def test_entity_consistency(lexicon):
    refs = ["does insulin help gout?", "what is asthma?", "hello"]
    assert entity_consistency(refs, refs, lexicon) == 1.0
    assert entity_consistency(["x", "y", "z"], refs, lexicon) == 0.0
    assert entity_consistency(["insulin", "asthma rash", ""], refs, lexicon) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        entity_consistency(["a"], refs, lexicon)
    with pytest.raises(UndefinedRatio):
        entity_consistency(["a"], ["plain"], lexicon)


def test_entity_consistency_brute_force(lexicon):
    g = random.Random(0)
    terms = ["gout", "insulin", "asthma", "rash", "mri", "fever"]
    refs = [" ".join(g.sample(terms, g.randint(1, 3))) for _ in range(15)]
    gens = [" ".join(g.sample(terms, g.randint(0, 3))) for _ in range(15)]
    hit = sum(len(set(r.split()) & set(x.split())) for r, x in zip(refs, gens))
    total = sum(len(set(r.split())) for r in refs)
    assert entity_consistency(gens, refs, lexicon) == pytest.approx(hit / total)


def test_evaluate_with_echo_and_failures(toy_splits, lexicon):
    test = toy_splits.test
    report = evaluate(ReferenceEcho(test), test, lexicon)
    assert report.rouge1_f1 == report.rouge2_f1 == report.rougeL_f1 == 1.0
    assert report.entity_consistency == 1.0 and report.failed == 0

    bad_id = test[0].chq

    def flaky(chqs):
        if len(chqs) > 1:
            raise RuntimeError("batch failed")
        if chqs[0] == bad_id:
            raise RuntimeError("sample failed")
        return ReferenceEcho(test)(chqs)

    report = evaluate(flaky, test, lexicon)
    assert report.failed == 1
    assert report.rouge1_f1 == pytest.approx((len(test) - 1) / len(test))


def test_report_json_and_table(toy_splits, tmp_path):
    report = evaluate(ReferenceEcho(toy_splits.test), toy_splits.test)
    report.save(tmp_path / "r.json")
    back = MetricsReport.from_json(json.loads((tmp_path / "r.json").read_text()))
    assert back == report
    table = format_table({"echo": [report]})
    assert "100.00" in table and "-" in table.splitlines()[-1]
