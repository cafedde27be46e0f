"""Counter-based random streams.

Every random decision in the package is drawn from a Philox stream whose key
is a hash of ``(seed, *labels)``.  Streams never share state, so results do
not depend on call order or on how work is spread over threads.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *labels: object) -> int:
    """Return a 128-bit integer key for ``(seed, *labels)``."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode("ascii"))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def derive_seed(seed: int, *labels: object) -> int:
    """63-bit integer seed, e.g. for APIs that take a plain int."""
    return derive_key(seed, *labels) >> 65


def stream(seed: int, *labels: object) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *labels)))
