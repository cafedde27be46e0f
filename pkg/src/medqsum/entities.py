"""Medical entity recognition, the training entity dictionary, and focus rate.

Two recognizers share one interface (``recognize(text) -> list[EntitySpan]``):

* :class:`LexiconRecognizer` does greedy longest-match over a term list.
* :class:`ExternalNERRecognizer` talks to an NER process over stdio using
  newline-delimited JSON (``{"text": ...}`` in, ``{"spans": [...]}`` out).
"""

from __future__ import annotations

import json
import logging
import re
import shutil
import subprocess
import tempfile
import threading
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from medqsum.corpus import Dataset, normalize_text

log = logging.getLogger(__name__)

_TOKEN = re.compile(r"\w+|[^\w\s]")


class RecognizerError(RuntimeError):
    pass


class RecognizerUnavailable(RecognizerError):
    """The external NER tool could not be started or stopped responding."""


class UndefinedRatio(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class EntitySpan:
    surface: str
    start: int
    end: int
    category: str | None = None

    def check(self, source: str) -> None:
        if not (0 <= self.start < self.end <= len(source)) or source[self.start:self.end] != self.surface:
            raise RecognizerError(f"span {self.start}:{self.end} {self.surface!r} does not match source text")

    def to_json(self) -> dict:
        return {"surface": self.surface, "start": self.start, "end": self.end, "category": self.category}

    @classmethod
    def from_json(cls, obj: dict) -> "EntitySpan":
        return cls(obj["surface"], int(obj["start"]), int(obj["end"]), obj.get("category"))


class Recognizer(Protocol):
    def recognize(self, text: str) -> list[EntitySpan]: ...


def resolve_overlaps(spans: Iterable[EntitySpan]) -> list[EntitySpan]:
    """Keep a non-overlapping left-to-right subset, preferring longer spans at equal starts."""
    out: list[EntitySpan] = []
    for s in sorted(spans, key=lambda s: (s.start, -(s.end - s.start))):
        if not out or s.start >= out[-1].end:
            out.append(s)
    return out


# --------------------------------------------------------------------------
# lexicon matcher


def _fold(tok: str) -> str:
    return normalize_text(tok)


def read_lexicon(path) -> dict[str, str | None]:
    """Parse a lexicon file: one term per line, optional ``\\t<category>``, ``#`` comments."""
    terms: dict[str, str | None] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        term, _, category = line.partition("\t")
        term = term.strip()
        if term:
            terms.setdefault(term, category.strip() or None)
    return terms


def bundled_lexicon_path() -> Path:
    return Path(str(resources.files("medqsum") / "data" / "lexicon.txt"))


class LexiconRecognizer:
    """Case-insensitive greedy longest match on token boundaries.

    Lexicon entries are tokenized the same way as the text, so internal
    whitespace differences do not matter but punctuation does.
    """

    def __init__(self, terms: dict[str, str | None] | Iterable[str]):
        if not isinstance(terms, dict):
            terms = {t: None for t in terms}
        self._trie: dict = {}
        self.max_tokens = 0
        for term, category in terms.items():
            toks = [_fold(t) for t in _TOKEN.findall(term)]
            if not toks:
                continue
            node = self._trie
            for t in toks:
                node = node.setdefault(t, {})
            # smallest category label wins so lexicon order does not matter
            prev = node.get(None)
            if prev is None or (category or "") < (prev or ""):
                node[None] = category or ""
            self.max_tokens = max(self.max_tokens, len(toks))

    @classmethod
    def from_file(cls, path) -> "LexiconRecognizer":
        return cls(read_lexicon(path))

    @classmethod
    def bundled(cls) -> "LexiconRecognizer":
        return cls.from_file(bundled_lexicon_path())

    def recognize(self, text: str) -> list[EntitySpan]:
        toks = [(m.start(), m.end(), _fold(m.group())) for m in _TOKEN.finditer(text)]
        spans = []
        i = 0
        while i < len(toks):
            node, best = self._trie, None
            for j in range(i, len(toks)):
                node = node.get(toks[j][2])
                if node is None:
                    break
                if None in node:
                    best = (j, node[None])
            if best is None:
                i += 1
                continue
            j, category = best
            start, end = toks[i][0], toks[j][1]
            spans.append(EntitySpan(text[start:end], start, end, category or None))
            i = j + 1
        return spans


# --------------------------------------------------------------------------
# external NER process


class ExternalNERRecognizer:
    """Client for an NER tool speaking newline-delimited JSON on stdio.

    The process is started lazily and shared; requests are serialized with a
    lock so concurrent callers are safe. ``recognize_batch`` uses the tool's
    one-shot batch mode (``<command> --batch <file>``) instead.
    """

    def __init__(self, command: Sequence[str], timeout: float = 60.0):
        self.command = list(command)
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()

    def _ensure(self) -> subprocess.Popen:
        if self._proc is not None and self._proc.poll() is None:
            return self._proc
        if not self.command or shutil.which(self.command[0]) is None:
            raise RecognizerUnavailable(f"NER command not found: {self.command[:1]}")
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as e:
            raise RecognizerUnavailable(f"cannot start NER command {self.command}: {e}") from e
        return self._proc

    @staticmethod
    def _parse(text: str, line: str) -> list[EntitySpan]:
        try:
            obj = json.loads(line)
            spans = [EntitySpan.from_json(s) for s in obj["spans"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise RecognizerError(f"malformed NER response: {line[:200]!r}") from e
        for s in spans:
            s.check(text)
        return resolve_overlaps(spans)

    def recognize(self, text: str) -> list[EntitySpan]:
        with self._lock:
            proc = self._ensure()
            try:
                proc.stdin.write(json.dumps({"text": text}, ensure_ascii=False) + "\n")
                proc.stdin.flush()
                line = proc.stdout.readline()
            except (BrokenPipeError, OSError) as e:
                raise RecognizerUnavailable(f"NER process died: {e}") from e
            if not line:
                raise RecognizerUnavailable("NER process closed its output")
        return self._parse(text, line)

    def recognize_batch(self, texts: Sequence[str]) -> list[list[EntitySpan]]:
        if not self.command or shutil.which(self.command[0]) is None:
            raise RecognizerUnavailable(f"NER command not found: {self.command[:1]}")
        with tempfile.NamedTemporaryFile("w", suffix=".jsonl", encoding="utf-8", delete=False) as f:
            for t in texts:
                f.write(json.dumps({"text": t}, ensure_ascii=False) + "\n")
            batch_path = f.name
        try:
            out = subprocess.run(
                self.command + ["--batch", batch_path],
                capture_output=True, text=True, encoding="utf-8", timeout=self.timeout, check=True,
            ).stdout
        except (OSError, subprocess.SubprocessError) as e:
            raise RecognizerUnavailable(f"NER batch run failed: {e}") from e
        finally:
            Path(batch_path).unlink(missing_ok=True)
        lines = [l for l in out.splitlines() if l.strip()]
        if len(lines) != len(texts):
            raise RecognizerError(f"NER batch returned {len(lines)} responses for {len(texts)} texts")
        return [self._parse(t, l) for t, l in zip(texts, lines)]

    def close(self) -> None:
        with self._lock:
            if self._proc is not None:
                if self._proc.stdin:
                    self._proc.stdin.close()
                try:
                    self._proc.wait(timeout=5)
                except subprocess.TimeoutExpired:
                    self._proc.kill()
                self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class FallbackRecognizer:
    """Use ``primary`` until it reports itself unavailable, then ``fallback``."""

    def __init__(self, primary: Recognizer, fallback: Recognizer):
        self.primary, self.fallback = primary, fallback
        self._failed = False

    def recognize(self, text: str) -> list[EntitySpan]:
        if not self._failed:
            try:
                return self.primary.recognize(text)
            except RecognizerUnavailable as e:
                log.warning("external NER unavailable (%s); falling back to lexicon matcher", e)
                self._failed = True
        return self.fallback.recognize(text)


# --------------------------------------------------------------------------
# dictionary and focus rate


@dataclass
class EntityDictionary:
    counts: dict[str, int]

    @property
    def entries(self) -> set[str]:
        return set(self.counts)

    def __len__(self) -> int:
        return len(self.counts)

    def __contains__(self, surface: str) -> bool:
        return normalize_text(surface) in self.counts

    def candidates(self, exclude: Iterable[str] = ()) -> list[str]:
        """Sorted entries minus ``exclude`` (compared after normalization)."""
        drop = {normalize_text(e) for e in exclude}
        return sorted(e for e in self.counts if e not in drop)

    def to_json(self) -> dict:
        return {"entries": {k: self.counts[k] for k in sorted(self.counts)}}

    @classmethod
    def from_json(cls, obj: dict) -> "EntityDictionary":
        return cls(dict(obj["entries"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EntityDictionary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def recognize_pair(recognizer: Recognizer, pair_id: str, text: str) -> list[EntitySpan]:
    try:
        return recognizer.recognize(text)
    except RecognizerError as e:
        raise type(e)(f"sample {pair_id}: {e}") from e


def build_entity_dictionary(train: Dataset, recognizer: Recognizer) -> EntityDictionary:
    if not len(train):
        raise ValueError("cannot build an entity dictionary from an empty training set")
    counts: Counter[str] = Counter()
    for p in train:
        for span in recognize_pair(recognizer, p.id, p.faq):
            key = normalize_text(span.surface)
            if key:
                counts[key] += 1
    return EntityDictionary(dict(sorted(counts.items())))


def focus_identification_rate(ds: Dataset, recognizer: Recognizer) -> float:
    """Fraction of pairs whose FAQ contains at least one recognized entity."""
    if not len(ds):
        raise UndefinedRatio("focus identification rate of an empty dataset is undefined")
    hits = sum(1 for p in ds if recognize_pair(recognizer, p.id, p.faq))
    return hits / len(ds)
