"""Hard negatives by entity substitution, and per-pair negative pools.

A hard negative keeps a summary's wording but swaps its medical entities for
entities drawn uniformly from the training dictionary minus the summary's own
entities. Pools are built once before training and stored as JSONL.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from medqsum import rng
from medqsum.corpus import Dataset, normalize_text
from medqsum.entities import EntityDictionary, EntitySpan, Recognizer, recognize_pair

OK = "ok"
NO_ENTITIES = "no-entities"
NO_CANDIDATES = "no-candidates"

# per-dataset defaults for the number of negatives generated per summary
DEFAULT_SAMPLE_SIZE = {"meqsum": 128, "chq-summ": 128, "icliniq": 256, "healthcaremagic": 512}

SCOPES = ("all", "each")


class EmptyHardSet(LookupError):
    """No hard negatives are available for the requested batch."""


@dataclass(frozen=True)
class Substitution:
    original: str
    replacement: str
    source_span: tuple[int, int]  # in the source summary
    span: tuple[int, int]  # in the negative

    def to_json(self) -> dict:
        return {
            "original": self.original,
            "replacement": self.replacement,
            "source_span": list(self.source_span),
            "span": list(self.span),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Substitution":
        return cls(obj["original"], obj["replacement"], tuple(obj["source_span"]), tuple(obj["span"]))


@dataclass
class HardNegativeSet:
    source_id: str
    negatives: list[str] = field(default_factory=list)
    provenance: list[list[Substitution]] = field(default_factory=list)
    flag: str = OK

    def __len__(self) -> int:
        return len(self.negatives)

    def to_json(self) -> dict:
        return {
            "id": self.source_id,
            "negatives": self.negatives,
            "provenance": [[s.to_json() for s in subs] for subs in self.provenance],
            "flag": self.flag,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HardNegativeSet":
        return cls(
            obj["id"],
            list(obj["negatives"]),
            [[Substitution.from_json(s) for s in subs] for subs in obj["provenance"]],
            obj["flag"],
        )


def default_sample_size(dataset_name: str) -> int:
    key = dataset_name.lower().replace("_", "-")
    if key not in DEFAULT_SAMPLE_SIZE:
        raise KeyError(f"no default sample size for {dataset_name!r}; known: {sorted(DEFAULT_SAMPLE_SIZE)}")
    return DEFAULT_SAMPLE_SIZE[key]


def _substitute(faq: str, spans: Sequence[EntitySpan], replacements: Sequence[str]) -> tuple[str, list[Substitution]]:
    pieces, subs = [], []
    pos = out_len = 0
    for span, rep in zip(spans, replacements):
        gap = faq[pos:span.start]
        pieces += [gap, rep]
        out_len += len(gap)
        subs.append(Substitution(span.surface, rep, (span.start, span.end), (out_len, out_len + len(rep))))
        out_len += len(rep)
        pos = span.end
    pieces.append(faq[pos:])
    return "".join(pieces), subs


def generate_hard_negatives(
    faq: str,
    entities: Sequence[EntitySpan],
    dictionary: EntityDictionary,
    X: int,
    rng_seed: int,
    *,
    source_id: str = "",
    scope: str = "all",
) -> HardNegativeSet:
    """Build ``X`` hard negatives for one summary.

    ``scope="all"`` replaces every entity span in each negative (``X``
    negatives). ``scope="each"`` replaces one entity at a time, ``X`` times per
    entity (``t * X`` negatives for ``t`` entities).
    """
    if X < 1:
        raise ValueError(f"X must be >= 1, got {X}")
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    spans = sorted(entities, key=lambda s: s.start)
    for a, b in zip(spans, spans[1:]):
        if b.start < a.end:
            raise ValueError(f"overlapping entity spans {a} and {b}")
    for s in spans:
        s.check(faq)

    out = HardNegativeSet(source_id)
    if not spans:
        out.flag = NO_ENTITIES
        return out
    candidates = dictionary.candidates(exclude=[s.surface for s in spans])
    if not candidates:
        out.flag = NO_CANDIDATES
        return out

    gen = rng.stream(rng_seed, "hard-negatives")
    groups = [spans] if scope == "all" else [[s] for s in spans]
    for group in groups:
        for _ in range(X):
            picks = [candidates[i] for i in gen.integers(len(candidates), size=len(group))]
            text, subs = _substitute(faq, group, picks)
            out.negatives.append(text)
            out.provenance.append(subs)
    return out


def build_negative_pool(
    train: Dataset,
    recognizer: Recognizer,
    dictionary: EntityDictionary,
    X: int,
    rng_seed: int,
    *,
    scope: str = "all",
) -> dict[str, HardNegativeSet]:
    """One :class:`HardNegativeSet` per training pair, keyed by pair id.

    Each pair's stream is keyed on ``(rng_seed, pair id)`` so the pool does not
    depend on pair order.
    """
    pool = {}
    for p in train:
        spans = recognize_pair(recognizer, p.id, p.faq)
        pool[p.id] = generate_hard_negatives(
            p.faq, spans, dictionary, X, rng.derive_seed(rng_seed, "pair", p.id), source_id=p.id, scope=scope
        )
    return pool


def save_pool(pool: Mapping[str, HardNegativeSet], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for hs in pool.values():
            f.write(json.dumps(hs.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def load_pool(path) -> dict[str, HardNegativeSet]:
    pool = {}
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            if line.strip():
                hs = HardNegativeSet.from_json(json.loads(line))
                pool[hs.source_id] = hs
    return pool


@dataclass
class HardBatch:
    texts: list[str]
    with_replacement: bool = False


def draw_hard_batch(
    pool: Mapping[str, HardNegativeSet], batch_ids: Sequence[str], n_h: int, rng_seed: int
) -> HardBatch:
    """Sample ``n_h`` negatives from the union of the batch members' pools.

    Without replacement when the union is large enough, otherwise with
    replacement (flagged on the result).
    """
    if n_h < 1:
        raise ValueError(f"n_h must be >= 1, got {n_h}")
    union = [t for pid in batch_ids if pid in pool for t in pool[pid].negatives]
    if not union:
        raise EmptyHardSet(f"no hard negatives for batch {list(batch_ids)[:4]}...")
    gen = rng.stream(rng_seed, "hard-batch", *batch_ids)
    if len(union) >= n_h:
        idx = gen.choice(len(union), size=n_h, replace=False)
        return HardBatch([union[i] for i in idx], False)
    idx = gen.integers(len(union), size=n_h)
    return HardBatch([union[i] for i in idx], True)


def token_f1(a: str, b: str) -> float:
    """Bag-of-words F1 between two texts (whitespace tokens, normalized)."""
    ta, tb = Counter(normalize_text(a).split()), Counter(normalize_text(b).split())
    overlap = sum((ta & tb).values())
    if not overlap:
        return 0.0
    p, r = overlap / sum(ta.values()), overlap / sum(tb.values())
    return 2 * p * r / (p + r)
