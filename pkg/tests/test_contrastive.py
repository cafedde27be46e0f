import math
from collections import deque

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from medqsum.contrastive import (
    QUEUE_SIZE,
    NegativeQueue,
    SkippedLoss,
    cosine_similarity,
    enqueue_dequeue,
    hcl_loss,
    info_nce,
    scl_loss,
    total_loss,
)

D = torch.float64


def unit(*xs):
    return torch.tensor(xs, dtype=D)


def test_defaults():
    assert QUEUE_SIZE == 4096
    assert NegativeQueue().capacity == 4096


def test_cosine():
    assert cosine_similarity([1.0, 0.0], [2.0, 0.0]).item() == 1.0
    assert cosine_similarity([1.0, 0.0], [0.0, 3.0]).item() == 0.0
    with pytest.raises(ValueError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        cosine_similarity([1.0], [1.0, 0.0])


@pytest.mark.parametrize("K", [1, 16, 128])
def test_uniform_similarity_gives_log_k_plus_one(K):
    a = torch.ones(1, 4, dtype=D)
    loss = info_nce(a, a, torch.ones(K, 4, dtype=D), tau=0.07)
    assert loss.item() == pytest.approx(math.log(K + 1), abs=1e-9)


def test_saturation():
    a = unit(1.0, 0.0)[None]
    negs = unit(-1.0, 0.0).repeat(5, 1)
    assert info_nce(a, a, negs, tau=0.01).item() < 1e-6


def test_three_negative_hand_case():
    a = unit(1.0, 0.0)[None]
    pos = unit(1.0, 1.0)[None]  # cos = 1/sqrt2
    negs = torch.stack([unit(0.0, 1.0), unit(-1.0, 0.0), unit(1.0, -1.0)])  # cos 0, -1, 1/sqrt2
    tau = 0.5
    s = [1 / math.sqrt(2), 0.0, -1.0, 1 / math.sqrt(2)]
    expected = -math.log(math.exp(s[0] / tau) / sum(math.exp(x / tau) for x in s))
    assert info_nce(a, pos, negs, tau).item() == pytest.approx(expected, abs=1e-12)
    strict = -math.log(math.exp(s[0] / tau) / sum(math.exp(x / tau) for x in s[1:]))
    assert info_nce(a, pos, negs, tau, include_positive=False).item() == pytest.approx(strict, abs=1e-12)


def test_scale_invariance_and_per_anchor_negatives():
    g = torch.Generator().manual_seed(0)
    a, p = torch.randn(3, 5, generator=g, dtype=D), torch.randn(3, 5, generator=g, dtype=D)
    n = torch.randn(4, 5, generator=g, dtype=D)
    base = info_nce(a, p, n, 0.2)
    assert info_nce(7 * a, 0.3 * p, 2 * n, 0.2).item() == pytest.approx(base.item(), abs=1e-12)
    per_anchor = info_nce(a, p, n.expand(3, 4, 5), 0.2)
    assert per_anchor.item() == pytest.approx(base.item(), abs=1e-12)


def test_loss_decreases_as_positive_gets_closer():
    a = unit(1.0, 0.0)[None]
    negs = torch.stack([unit(0.0, 1.0), unit(0.0, -1.0)])
    losses = [info_nce(a, unit(math.cos(t), math.sin(t))[None], negs, 0.1).item() for t in (1.2, 0.8, 0.4, 0.0)]
    assert all(x > y for x, y in zip(losses, losses[1:]))


def test_invalid_temperature():
    with pytest.raises(ValueError):
        info_nce(torch.ones(1, 2), torch.ones(1, 2), torch.ones(1, 2), tau=0.0)


def test_queue_fifo_and_wraparound():
    q = NegativeQueue(capacity=3)
    q.enqueue(unit(1.0)[None])
    q.enqueue(torch.tensor([[2.0], [3.0]], dtype=D))
    assert q.entries.flatten().tolist() == [1.0, 2.0, 3.0]
    enqueue_dequeue(q, torch.tensor([[4.0], [5.0]], dtype=D))
    assert q.entries.flatten().tolist() == [3.0, 4.0, 5.0]
    with pytest.raises(ValueError):
        q.enqueue(torch.zeros(4, 1))
    with pytest.raises(ValueError):
        q.enqueue(torch.zeros(1, 2))
    q.clear()
    assert len(q) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.lists(st.integers(1, 9), max_size=40))
def test_queue_matches_deque(capacity, sizes):
    q, oracle, counter = NegativeQueue(capacity, dim=1, dtype=D), deque(maxlen=capacity), 0
    for n in sizes:
        n = min(n, capacity)
        vals = list(range(counter, counter + n))
        counter += n
        q.enqueue(torch.tensor(vals, dtype=D)[:, None])
        oracle.extend(vals)
        assert q.entries.flatten().tolist() == list(oracle)


def test_queue_stores_detached_copies():
    x = torch.ones(2, 3, requires_grad=True)
    q = NegativeQueue(4).enqueue(x)
    assert not q.entries.requires_grad
    with torch.no_grad():
        x.add_(1.0)
    assert torch.equal(q.entries, torch.ones(2, 3))


def test_skipped_terms():
    a = torch.ones(2, 3)
    with pytest.raises(SkippedLoss):
        scl_loss(a, a, NegativeQueue(4))
    with pytest.raises(SkippedLoss):
        hcl_loss(a, a, torch.zeros(0, 3))
    assert total_loss(torch.tensor(1.5)).item() == 1.5
    assert total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0)).item() == 6.0


def test_four_hard_keys_hand_case():
    r_c = unit(1.0, 0.0, 0.0)[None]
    r_p = unit(1.0, 0.0, 0.0)[None]
    hard = torch.stack([unit(0.0, 1.0, 0.0), unit(0.0, 0.0, 1.0), unit(1.0, 1.0, 0.0), unit(-1.0, 0.0, 0.0)])
    tau = 0.07
    sims = np.array([1.0, 0.0, 0.0, 1 / math.sqrt(2), -1.0]) / tau
    expected = -(sims[0] - np.log(np.exp(sims).sum()))
    assert hcl_loss(r_c, r_p, hard, tau).item() == pytest.approx(expected, abs=1e-9)
