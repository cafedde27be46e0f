"""ROUGE-1/2/L F1, medical entity consistency, and metrics reports.

Scores come from a simple tokenizer (lowercase, split on whitespace and
punctuation, no stemming, no stopword removal), so they are comparable only
with other runs scored here, not with numbers from other ROUGE packages.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from medqsum.corpus import Dataset, normalize_text
from medqsum.entities import Recognizer, UndefinedRatio

log = logging.getLogger(__name__)

_WORD = re.compile(r"[^\W_]+", re.UNICODE)

SCORER_NOTE = (
    "ROUGE computed in-framework: lowercase, whitespace+punctuation tokenization, "
    "no stemming; not comparable to scores from other ROUGE implementations."
)


def eval_tokens(text: str) -> list[str]:
    return _WORD.findall(normalize_text(text))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if not n_cand or not n_ref or not overlap:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def rouge_n_scores(candidate: str, reference: str, n: int) -> tuple[float, float, float]:
    """(precision, recall, f1) with clipped n-gram counts."""
    c, r = _ngrams(eval_tokens(candidate), n), _ngrams(eval_tokens(reference), n)
    overlap = sum((c & r).values())
    nc, nr = sum(c.values()), sum(r.values())
    p = overlap / nc if nc else 0.0
    rec = overlap / nr if nr else 0.0
    return p, rec, _f1(overlap, nc, nr)


def rouge_n(candidate: str, reference: str, n: int = 1) -> float:
    return rouge_n_scores(candidate, reference, n)[2]


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    c, r = eval_tokens(candidate), eval_tokens(reference)
    return _f1(lcs_length(c, r), len(c), len(r))


def entity_set(text: str, recognizer: Recognizer) -> set[str]:
    return {normalize_text(s.surface) for s in recognizer.recognize(text)}


def entity_consistency(generated: Sequence[str], references: Sequence[str], recognizer: Recognizer) -> float:
    """Share of reference entities (summed over samples) that the generated
    summaries also contain."""
    if len(generated) != len(references):
        raise ValueError(f"{len(generated)} generated vs {len(references)} references")
    hit = total = 0
    for gen, ref in zip(generated, references):
        ref_ents = entity_set(ref, recognizer)
        if not ref_ents:
            continue
        hit += len(ref_ents & entity_set(gen, recognizer))
        total += len(ref_ents)
    if not total:
        raise UndefinedRatio("no reference summary contains an entity")
    return hit / total


# --------------------------------------------------------------------------
# reports


@dataclass
class SampleScore:
    id: str
    generated: str
    reference: str
    rouge1: float
    rouge2: float
    rougeL: float
    failed: bool = False


@dataclass
class MetricsReport:
    dataset: str
    rouge1_f1: float
    rouge2_f1: float
    rougeL_f1: float
    entity_consistency: float | None
    samples: int
    failed: int = 0
    rows: list[SampleScore] = field(default_factory=list)

    def to_json(self, with_rows: bool = True) -> dict:
        d = asdict(self)
        d["note"] = SCORER_NOTE
        if not with_rows:
            d.pop("rows")
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        rows = [SampleScore(**r) for r in obj.get("rows", [])]
        keys = ("dataset", "rouge1_f1", "rouge2_f1", "rougeL_f1", "entity_consistency", "samples", "failed")
        return cls(**{k: obj[k] for k in keys if k in obj}, rows=rows)

    def save(self, path, with_rows: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_json(with_rows), ensure_ascii=False, indent=1, sort_keys=True) + "\n",
                              encoding="utf-8")


def evaluate(
    summarize: Callable[[Sequence[str]], list[str]] | object,
    test: Dataset,
    recognizer: Recognizer | None = None,
    strategy: str = "greedy",
    width: int = 4,
) -> MetricsReport:
    """Generate a summary for every test question and score it.

    ``summarize`` is either a :class:`~medqsum.model.Summarizer` or a callable
    mapping a list of questions to a list of summaries. A sample whose
    generation raises is scored 0 and counted in ``failed``.
    """
    chqs = [p.chq for p in test]
    if hasattr(summarize, "summarize_many"):
        many = lambda qs: summarize.summarize_many(qs, strategy=strategy, width=width)
        one = lambda q: summarize.generate_summary(q, strategy=strategy, width=width)
    else:
        many = summarize
        one = lambda q: summarize([q])[0]
    try:
        outputs: list[str | None] = list(many(chqs))
    except Exception:
        log.warning("batched generation failed; retrying sample by sample", exc_info=True)
        outputs = []
        for p in test:
            try:
                outputs.append(one(p.chq))
            except Exception:
                log.warning("generation failed for sample %s", p.id, exc_info=True)
                outputs.append(None)

    rows = []
    for p, out in zip(test, outputs):
        if out is None:
            rows.append(SampleScore(p.id, "", p.faq, 0.0, 0.0, 0.0, failed=True))
        else:
            rows.append(SampleScore(p.id, out, p.faq, rouge_n(out, p.faq, 1), rouge_n(out, p.faq, 2), rouge_l(out, p.faq)))
    n = len(rows)
    consistency = None
    if recognizer is not None and n:
        try:
            consistency = entity_consistency([r.generated for r in rows], [r.reference for r in rows], recognizer)
        except UndefinedRatio:
            log.warning("entity consistency undefined: no reference entities in %s", test.name)
    mean = lambda xs: sum(xs) / n if n else 0.0
    return MetricsReport(
        dataset=test.name,
        rouge1_f1=mean([r.rouge1 for r in rows]),
        rouge2_f1=mean([r.rouge2 for r in rows]),
        rougeL_f1=mean([r.rougeL for r in rows]),
        entity_consistency=consistency,
        samples=n,
        failed=sum(r.failed for r in rows),
        rows=rows,
    )


def format_table(runs: dict[str, list[MetricsReport]]) -> str:
    """Aligned text grid: one row per run, R1/R2/RL/EC columns per dataset (x100)."""
    datasets: list[str] = []
    for reports in runs.values():
        for r in reports:
            if r.dataset not in datasets:
                datasets.append(r.dataset)
    metrics = [("R1", "rouge1_f1"), ("R2", "rouge2_f1"), ("RL", "rougeL_f1"), ("EC", "entity_consistency")]
    header1 = ["run"] + [d if k == 0 else "" for d in datasets for k in range(len(metrics))]
    header2 = [""] + [m for _ in datasets for m, _ in metrics]
    body = []
    for name, reports in runs.items():
        by_ds = {r.dataset: r for r in reports}
        row = [name]
        for d in datasets:
            for _, attr in metrics:
                v = getattr(by_ds[d], attr) if d in by_ds else None
                row.append("-" if v is None else f"{100 * v:.2f}")
        body.append(row)
    table = [header1, header2] + body
    widths = [max(len(r[i]) for r in table) for i in range(len(header1))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in table]
    lines.insert(2, "-" * len(lines[0]))
    return "\n".join([SCORER_NOTE, *lines])


class ReferenceEcho:
    """Oracle summarizer that returns the reference summary of each known question."""

    def __init__(self, ds: Dataset):
        self.lookup = {normalize_text(p.chq): p.faq for p in ds}

    def __call__(self, chqs: Sequence[str]) -> list[str]:
        return [self.lookup[normalize_text(q)] for q in chqs]
