"""Negative queue and InfoNCE losses over sentence representations."""

from __future__ import annotations

import logging
from typing import Optional

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

TAU = 0.07
MOMENTUM = 0.999
QUEUE_SIZE = 4096


class SkippedLoss(Exception):
    """A loss term has nothing to contrast against (empty queue or hard set)."""


def cosine_similarity(u, v) -> torch.Tensor:
    """u.v / (|u| |v|) along the last axis; zero vectors are an error."""
    u, v = torch.as_tensor(u), torch.as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"length mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    nu, nv = u.norm(dim=-1), v.norm(dim=-1)
    if bool((nu == 0).any()) or bool((nv == 0).any()):
        raise ValueError("cosine similarity of a zero vector is undefined")
    return (u * v).sum(dim=-1) / (nu * nv)


class NegativeQueue:
    """Fixed-capacity FIFO of detached key representations (ring buffer)."""

    def __init__(self, capacity: int = QUEUE_SIZE, dim: int | None = None, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dtype = dtype
        self._buf: Optional[torch.Tensor] = None if dim is None else torch.zeros(capacity, dim, dtype=dtype)
        self._ptr = 0  # next write slot
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def entries(self) -> torch.Tensor:
        """Entries oldest first, shape (len, dim)."""
        if self._buf is None:
            return torch.zeros(0, 0, dtype=self.dtype)
        if self._size < self.capacity:
            return self._buf[: self._size].clone()
        return torch.cat([self._buf[self._ptr:], self._buf[: self._ptr]])

    def enqueue(self, keys: torch.Tensor) -> "NegativeQueue":
        keys = torch.as_tensor(keys).detach().to(self.dtype)
        if keys.dim() == 1:
            keys = keys[None]
        n = keys.shape[0]
        if n > self.capacity:
            raise ValueError(f"batch of {n} keys exceeds queue capacity {self.capacity}")
        if self._buf is None:
            self._buf = torch.zeros(self.capacity, keys.shape[1], dtype=self.dtype)
        elif keys.shape[1] != self._buf.shape[1]:
            raise ValueError(f"key dim {keys.shape[1]} != queue dim {self._buf.shape[1]}")
        idx = (self._ptr + torch.arange(n)) % self.capacity
        self._buf[idx] = keys
        self._ptr = (self._ptr + n) % self.capacity
        self._size = min(self.capacity, self._size + n)
        return self

    def clear(self) -> None:
        self._buf, self._ptr, self._size = None, 0, 0


def enqueue_dequeue(q: NegativeQueue, batch_keys) -> NegativeQueue:
    return q.enqueue(batch_keys)


def info_nce(anchor, positive, negatives, tau: float = TAU, *, include_positive: bool = True) -> torch.Tensor:
    """Mean over anchors of -log(e^{s+/tau} / Z).

    ``anchor`` and ``positive`` are (B, D); ``negatives`` is (K, D) shared by
    all anchors, or (B, K, D) per anchor. Z sums the negatives' exponentials
    plus, unless ``include_positive`` is False, the positive's.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    anchor = torch.as_tensor(anchor)
    positive = torch.as_tensor(positive).to(anchor.dtype)
    negatives = torch.as_tensor(negatives).to(anchor.dtype)
    if anchor.dim() == 1:
        anchor, positive = anchor[None], positive[None]
    if negatives.shape[-2] == 0:
        raise SkippedLoss("no negatives")
    a = F.normalize(anchor, dim=-1)
    pos = (a * F.normalize(positive, dim=-1)).sum(-1, keepdim=True)
    n = F.normalize(negatives, dim=-1)
    neg = a @ n.T if n.dim() == 2 else torch.einsum("bd,bkd->bk", a, n)
    if not (torch.isfinite(pos).all() and torch.isfinite(neg).all()):
        raise FloatingPointError("non-finite similarity")
    logits = (torch.cat([pos, neg], dim=1) if include_positive else neg) / tau
    return (torch.logsumexp(logits, dim=1) - pos[:, 0] / tau).mean()


def scl_loss(r_chq, r_pos, queue: NegativeQueue | torch.Tensor, tau: float = TAU, *, strict: bool = False):
    """Contrast each question with its summary against the queued summaries."""
    negs = queue.entries if isinstance(queue, NegativeQueue) else queue
    if len(negs) == 0:
        raise SkippedLoss("negative queue is empty")
    return info_nce(r_chq, r_pos, negs, tau, include_positive=not strict)


def hcl_loss(r_chq, r_pos, hard_keys, tau: float = TAU, *, strict: bool = False):
    """Contrast each question with its summary against entity-swapped summaries."""
    hard_keys = torch.as_tensor(hard_keys)
    if hard_keys.numel() == 0:
        raise SkippedLoss("no hard negatives")
    return info_nce(r_chq, r_pos, hard_keys.detach(), tau, include_positive=not strict)


def total_loss(l_ce, l_scl=None, l_hcl=None):
    """Unweighted sum; ``None`` terms were skipped and contribute nothing."""
    total = l_ce
    for name, term in (("scl", l_scl), ("hcl", l_hcl)):
        if term is None:
            log.debug("loss term %s skipped", name)
            continue
        total = total + term
    return total

