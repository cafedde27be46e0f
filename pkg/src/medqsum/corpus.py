"""Question/summary datasets: loading, deduplication, splitting, leakage audit."""

from __future__ import annotations

import csv
import io
import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from medqsum import rng

log = logging.getLogger(__name__)

FORMATS = ("jsonl", "csv", "tsv")

_WS = re.compile(r"\s+")


class CorpusError(ValueError):
    """Raised for unreadable or malformed dataset files."""


def normalize_text(raw: str) -> str:
    """Canonical form used for duplicate detection.

    NFC, whitespace runs (including non-breaking spaces) collapsed to one
    space, stripped, lowercased.
    """
    text = unicodedata.normalize("NFC", raw)
    text = _WS.sub(" ", text).strip().lower()
    # lower() can denormalize a handful of code points (e.g. U+0130)
    return unicodedata.normalize("NFC", text)


@dataclass(frozen=True)
class QuestionPair:
    id: str
    chq: str
    faq: str

    def key(self) -> tuple[str, str]:
        return normalize_text(self.chq), normalize_text(self.faq)


@dataclass(frozen=True)
class Dataset:
    name: str
    pairs: tuple[QuestionPair, ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        seen = set()
        for p in self.pairs:
            if p.id in seen:
                raise CorpusError(f"duplicate id {p.id!r} in dataset {self.name!r}")
            seen.add(p.id)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[QuestionPair]:
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.pairs]

    def by_id(self) -> dict[str, QuestionPair]:
        return {p.id: p for p in self.pairs}


@dataclass(frozen=True)
class SplitSet:
    train: Dataset
    dev: Dataset
    test: Dataset

    def items(self) -> list[tuple[str, Dataset]]:
        return [("train", self.train), ("dev", self.dev), ("test", self.test)]


@dataclass
class DuplicateReport:
    total: int
    duplicate_groups: list[tuple[str, list[str]]] = field(default_factory=list)
    removed: int = 0
    retained: int = 0

    def duplicate_ids(self) -> set[str]:
        return {d for _, dups in self.duplicate_groups for d in dups}

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "duplicate_groups": [[c, list(d)] for c, d in self.duplicate_groups],
            "removed": self.removed,
            "retained": self.retained,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DuplicateReport":
        return cls(
            total=obj["total"],
            duplicate_groups=[(c, list(d)) for c, d in obj["duplicate_groups"]],
            removed=obj["removed"],
            retained=obj["retained"],
        )


@dataclass(frozen=True)
class Leak:
    """One normalized (chq, faq) pair found in more than one split."""

    chq: str
    faq: str
    occurrences: tuple[tuple[str, str], ...]  # (split name, pair id)

    @property
    def splits(self) -> set[str]:
        return {s for s, _ in self.occurrences}


@dataclass
class LeakageReport:
    leaks: list[Leak] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.leaks)

    def __bool__(self) -> bool:
        return bool(self.leaks)

    def to_json(self) -> dict:
        return {
            "leaks": [
                {
                    "chq": l.chq,
                    "faq": l.faq,
                    "occurrences": [{"split": s, "id": i} for s, i in l.occurrences],
                }
                for l in self.leaks
            ]
        }


# --------------------------------------------------------------------------
# loading / saving


def _decode(data: bytes, path) -> str:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorpusError(f"{path}: invalid UTF-8 at byte offset {e.start}") from e
    return text[1:] if text.startswith("\ufeff") else text


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower().lstrip(".")
    if suffix in ("jsonl", "ndjson"):
        return "jsonl"
    if suffix in ("csv", "tsv"):
        return suffix
    raise CorpusError(f"cannot infer format from {path.name!r}; pass one of {FORMATS}")


def _records(text: str, fmt: str, path) -> Iterator[dict]:
    if fmt == "jsonl":
        n = 0
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            n += 1
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}: record {n} (line {lineno}) is not valid JSON: {e.msg}") from e
            if not isinstance(rec, dict):
                raise CorpusError(f"{path}: record {n} is not a JSON object")
            yield rec
    elif fmt in ("csv", "tsv"):
        delimiter = "," if fmt == "csv" else "\t"
        yield from csv.DictReader(io.StringIO(text, newline=""), delimiter=delimiter)
    else:
        raise CorpusError(f"unsupported format {fmt!r}; expected one of {FORMATS}")


def load_dataset(
    path,
    format: str | None = None,
    *,
    name: str | None = None,
    chq_field: str = "chq",
    faq_field: str = "faq",
    id_field: str = "id",
) -> Dataset:
    """Read a JSONL/CSV/TSV file into a :class:`Dataset`.

    Record order is preserved. Records without an id get their 0-based
    position as id. Errors refer to records by 1-based number.
    """
    path = Path(path)
    fmt = format or _infer_format(path)
    text = _decode(path.read_bytes(), path)
    pairs = []
    for n, rec in enumerate(_records(text, fmt, path), 1):
        for f in (chq_field, faq_field):
            value = rec.get(f)
            if value is None or (isinstance(value, str) and not normalize_text(value)):
                raise CorpusError(f"{path}: record {n} is missing field {f!r}")
            if not isinstance(value, str):
                raise CorpusError(f"{path}: record {n} field {f!r} is not a string")
        pid = rec.get(id_field)
        pid = str(n - 1) if pid in (None, "") else str(pid)
        pairs.append(QuestionPair(pid, rec[chq_field], rec[faq_field]))
    return Dataset(name or path.stem, pairs)


def save_dataset(ds: Dataset, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt == "jsonl":
        with path.open("w", encoding="utf-8", newline="\n") as f:
            for p in ds:
                f.write(json.dumps({"id": p.id, "chq": p.chq, "faq": p.faq}, ensure_ascii=False) + "\n")
    else:
        with path.open("w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, delimiter="," if fmt == "csv" else "\t", lineterminator="\n")
            w.writerow(["id", "chq", "faq"])
            for p in ds:
                w.writerow([p.id, p.chq, p.faq])


# --------------------------------------------------------------------------
# duplicates


def _shingles(text: str, n: int) -> frozenset:
    toks = text.split()
    if len(toks) < n:
        return frozenset([tuple(toks)]) if toks else frozenset()
    return frozenset(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def _jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _exact_groups(pairs: Sequence[QuestionPair]) -> list[list[str]]:
    groups: dict[tuple[str, str], list[str]] = {}
    for p in pairs:
        groups.setdefault(p.key(), []).append(p.id)
    return list(groups.values())


def _near_groups(pairs: Sequence[QuestionPair], threshold: float, shingle: int) -> list[list[str]]:
    # leader clustering: each pair joins the earliest group whose canonical
    # member is within the threshold
    sigs = [_shingles(" ".join(p.key()), shingle) for p in pairs]
    index: dict[tuple, list[int]] = {}
    groups: dict[int, list[str]] = {}
    for i, p in enumerate(pairs):
        candidates = sorted({g for s in sigs[i] for g in index.get(s, ())})
        leader = next((g for g in candidates if _jaccard(sigs[g], sigs[i]) >= threshold), None)
        if leader is None:
            groups[i] = [p.id]
            for s in sigs[i]:
                index.setdefault(s, []).append(i)
        else:
            groups[leader].append(p.id)
    return list(groups.values())


def find_duplicates(
    ds: Dataset, *, near: bool = False, threshold: float = 0.9, shingle: int = 3
) -> DuplicateReport:
    """Group pairs whose normalized chq and faq are both equal.

    The first occurrence is the canonical member. With ``near=True`` pairs
    are grouped by word-shingle Jaccard similarity >= ``threshold`` instead.
    """
    if near:
        groups = _near_groups(ds.pairs, threshold, shingle)
    else:
        groups = _exact_groups(ds.pairs)
    dup_groups = [(g[0], g[1:]) for g in groups if len(g) > 1]
    removed = sum(len(d) for _, d in dup_groups)
    return DuplicateReport(len(ds), dup_groups, removed, len(ds) - removed)


def deduplicate(ds: Dataset, **kwargs) -> tuple[Dataset, DuplicateReport]:
    report = find_duplicates(ds, **kwargs)
    drop = report.duplicate_ids()
    kept = [p for p in ds if p.id not in drop]
    return Dataset(ds.name, kept), report


def check_leakage(splits: SplitSet | Iterable[tuple[str, Dataset]]) -> LeakageReport:
    """Report every normalized (chq, faq) pair found in two or more splits."""
    named = splits.items() if isinstance(splits, SplitSet) else list(splits)
    seen: dict[tuple[str, str], list[tuple[str, str]]] = {}
    for split_name, ds in named:
        for p in ds:
            seen.setdefault(p.key(), []).append((split_name, p.id))
    leaks = [
        Leak(k[0], k[1], tuple(occ))
        for k, occ in seen.items()
        if len({s for s, _ in occ}) > 1
    ]
    return LeakageReport(leaks)


def split_dataset(ds: Dataset, sizes: tuple[int, int, int], seed: int) -> SplitSet:
    """Shuffle deterministically under ``seed`` and cut into train/dev/test.

    Deduplicate first; splitting a dataset that still holds duplicates can
    leak them across splits.
    """
    n_train, n_dev, n_test = (int(s) for s in sizes)
    if min(n_train, n_dev, n_test) < 0:
        raise CorpusError(f"split sizes must be non-negative, got {sizes}")
    requested = n_train + n_dev + n_test
    if requested > len(ds):
        raise CorpusError(f"split sizes request {requested} pairs but only {len(ds)} available")
    if find_duplicates(ds).removed:
        log.warning("splitting %r which still contains duplicates", ds.name)
    order = rng.stream(seed, "split").permutation(len(ds))
    pairs = [ds.pairs[i] for i in order]
    cuts = [0, n_train, n_train + n_dev, requested]
    parts = [Dataset(f"{ds.name}.{nm}", pairs[a:b]) for nm, a, b in zip(("train", "dev", "test"), cuts, cuts[1:])]
    return SplitSet(*parts)
