import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medqsum.corpus import (
    CorpusError,
    Dataset,
    DuplicateReport,
    QuestionPair,
    SplitSet,
    check_leakage,
    deduplicate,
    find_duplicates,
    load_dataset,
    normalize_text,
    save_dataset,
    split_dataset,
)


def test_normalize_examples():
    assert normalize_text("  What  IS\tgout?\n") == "what is gout?"
    assert normalize_text("Café") == "café"
    assert normalize_text("") == ""


@given(st.text())
def test_normalize_idempotent(s):
    assert normalize_text(normalize_text(s)) == normalize_text(s)


@given(st.text(alphabet=st.sampled_from("aB \t\nç̧é")))
def test_normalize_has_no_runs_of_space(s):
    out = normalize_text(s)
    assert "  " not in out and out == out.strip()


def _pairs(rows):
    return Dataset("d", [QuestionPair(str(i), c, f) for i, (c, f) in enumerate(rows)])


def _brute_groups(ds):
    """All-pairs comparison of normalized keys."""
    dup_of = {}
    for a, b in itertools.combinations(range(len(ds)), 2):
        pa, pb = ds[a], ds[b]
        if normalize_text(pa.chq) == normalize_text(pb.chq) and normalize_text(pa.faq) == normalize_text(pb.faq):
            dup_of.setdefault(pb.id, pa.id)
    return set(dup_of)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.sampled_from(["a", "A ", "b", "c c"]), st.sampled_from(["x", " X", "y"])), max_size=12))
def test_exact_duplicates_match_brute_force(rows):
    ds = _pairs(rows)
    report = find_duplicates(ds)
    assert report.duplicate_ids() == _brute_groups(ds)
    assert report.removed + report.retained == report.total == len(ds)


@settings(max_examples=40)
@given(st.lists(st.tuples(st.sampled_from(["a", "b", "a "]), st.sampled_from(["x", "y"])), max_size=10))
def test_dedup_idempotent(rows):
    once, _ = deduplicate(_pairs(rows))
    twice, report = deduplicate(once)
    assert [p.id for p in twice] == [p.id for p in once]
    assert report.removed == 0


def test_first_occurrence_is_canonical():
    ds = _pairs([("q", "s"), ("z", "s"), ("Q ", "S"), ("q", "s")])
    report = find_duplicates(ds)
    assert report.duplicate_groups == [("0", ["2", "3"])]
    clean, _ = deduplicate(ds)
    assert clean.ids == ["0", "1"]


def test_report_json_round_trip():
    report = find_duplicates(_pairs([("q", "s"), ("q", "s")]))
    assert DuplicateReport.from_json(json.loads(json.dumps(report.to_json()))) == report


def test_near_duplicates():
    ds = _pairs([
        ("my father has gout in his left foot what should he eat", "what should a person with gout eat?"),
        ("my father has gout in his left foot, what should he eat", "what should a person with gout eat?"),
        ("does insulin cause weight gain in older adults", "does insulin cause weight gain?"),
    ])
    assert find_duplicates(ds).removed == 0
    assert find_duplicates(ds, near=True, threshold=0.6).duplicate_ids() == {"1"}


def test_load_formats(tmp_path):
    (tmp_path / "a.jsonl").write_text('{"id": "x", "chq": "q1", "faq": "s1"}\n\n{"chq": "q2", "faq": "s2"}\n')
    ds = load_dataset(tmp_path / "a.jsonl")
    assert ds.ids == ["x", "1"] and ds[1].faq == "s2"
    (tmp_path / "b.csv").write_text('\ufeffQuestion,Summary\n"q, with comma",s\n', encoding="utf-8")
    ds = load_dataset(tmp_path / "b.csv", chq_field="Question", faq_field="Summary")
    assert ds[0].chq == "q, with comma" and ds[0].id == "0"
    (tmp_path / "c.tsv").write_text("id\tchq\tfaq\n7\tq\ts\n")
    assert load_dataset(tmp_path / "c.tsv")[0].id == "7"


def test_save_load_round_trip(tmp_path):
    ds = _pairs([("q \"one\"", "s\tone"), ("ünï", "çödé")])
    for ext in ("jsonl", "csv", "tsv"):
        save_dataset(ds, tmp_path / f"d.{ext}")
        back = load_dataset(tmp_path / f"d.{ext}", name="d")
        assert back == ds


def test_missing_field_reports_record_number(tmp_path):
    (tmp_path / "a.jsonl").write_text('{"chq": "q", "faq": "s"}\n{"chq": "q"}\n')
    with pytest.raises(CorpusError, match="record 2 is missing field 'faq'"):
        load_dataset(tmp_path / "a.jsonl")


def test_invalid_utf8_reports_offset(tmp_path):
    (tmp_path / "a.jsonl").write_bytes(b'{"chq": "q\xff", "faq": "s"}\n')
    with pytest.raises(CorpusError, match="byte offset 10"):
        load_dataset(tmp_path / "a.jsonl")


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        Dataset("d", [QuestionPair("1", "a", "b"), QuestionPair("1", "c", "d")])


def test_leakage_detects_cross_split_pairs():
    train = Dataset("train", [QuestionPair("t0", "Q1", "s1"), QuestionPair("t1", "q2", "s2")])
    dev = Dataset("dev", [QuestionPair("d0", "q1 ", "S1")])
    test = Dataset("test", [QuestionPair("e0", "q3", "s3"), QuestionPair("e1", "q3", "s3")])
    report = check_leakage(SplitSet(train, dev, test))
    assert len(report) == 1
    assert report.leaks[0].occurrences == (("train", "t0"), ("dev", "d0"))
    assert report.to_json()["leaks"][0]["occurrences"][1] == {"split": "dev", "id": "d0"}


def test_split_is_seeded_and_disjoint(toy):
    a = split_dataset(toy, (60, 20, 20), seed=3)
    b = split_dataset(toy, (60, 20, 20), seed=3)
    c = split_dataset(toy, (60, 20, 20), seed=4)
    assert [d.ids for _, d in a.items()] == [d.ids for _, d in b.items()]
    assert a.train.ids != c.train.ids
    all_ids = a.train.ids + a.dev.ids + a.test.ids
    assert sorted(all_ids) == sorted(toy.ids)


def test_split_rejects_oversized_request(toy):
    with pytest.raises(CorpusError):
        split_dataset(toy, (90, 10, 10), seed=0)
