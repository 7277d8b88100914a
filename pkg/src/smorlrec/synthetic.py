"""Synthetic session corpora with planted structure, for smoke tests and desk-scale runs."""
from __future__ import annotations

import numpy as np

from .data import SessionDataset


def _dataset(sessions, n_items):
    return SessionDataset(
        sessions=[np.asarray(s, dtype=np.int64) for s in sessions],
        item_ids=[str(i) for i in range(1, n_items + 1)],
        session_ids=[f"s{i}" for i in range(len(sessions))],
    )


def successor_sessions(n_items=20, n_sessions=2000, length=(3, 12), seed=0) -> SessionDataset:
    """Every click is followed by item ``i % n + 1``."""
    rng = np.random.default_rng(seed)
    sessions = []
    for _ in range(n_sessions):
        cur = int(rng.integers(1, n_items + 1))
        seq = [cur]
        for _ in range(int(rng.integers(length[0], length[1] + 1)) - 1):
            cur = cur % n_items + 1
            seq.append(cur)
        sessions.append(seq)
    return _dataset(sessions, n_items)


def paired_sessions(n_pairs=20, n_sessions=3000, length=(4, 10), seed=0) -> SessionDataset:
    """Items 2g-1 and 2g are interchangeable members of group g.

    Groups follow a fixed random successor map; the member shown is a coin
    flip, so both items of a pair occur in identical contexts.
    """
    rng = np.random.default_rng(seed)
    succ = rng.integers(0, n_pairs, size=(n_pairs, 3))
    sessions = []
    for _ in range(n_sessions):
        g = int(rng.integers(n_pairs))
        seq = []
        for _ in range(int(rng.integers(length[0], length[1] + 1))):
            seq.append(2 * g + 1 + int(rng.integers(2)))
            g = int(succ[g, rng.integers(3)])
        sessions.append(seq)
    return _dataset(sessions, 2 * n_pairs)


def zipf_sessions(
    n_items=500,
    n_sessions=20_000,
    exponent=1.1,
    n_successors=10,
    follow_prob=0.75,
    mean_length=6.0,
    seed=0,
) -> SessionDataset:
    """Zipf-popular catalog with planted item-to-item transitions.

    Item 1 is the most popular. Each item owns ``n_successors`` successors
    drawn by popularity; a click follows one of them (uniformly) with
    ``follow_prob``, otherwise it is a fresh popularity draw. Session lengths
    are 3 + geometric.
    """
    rng = np.random.default_rng(seed)
    pop = 1.0 / np.arange(1, n_items + 1) ** exponent
    pop /= pop.sum()
    succ = np.stack([rng.choice(n_items, size=n_successors, replace=False, p=pop) for _ in range(n_items)]) + 1
    extra = 1.0 / max(mean_length - 3.0, 1e-9)
    sessions = []
    for _ in range(n_sessions):
        length = 3 + int(rng.geometric(min(extra, 1.0))) - 1
        cur = int(rng.choice(n_items, p=pop)) + 1
        seq = [cur]
        for _ in range(length - 1):
            if rng.random() < follow_prob:
                cur = int(succ[cur - 1, rng.integers(n_successors)])
            else:
                cur = int(rng.choice(n_items, p=pop)) + 1
            seq.append(cur)
        sessions.append(seq)
    return _dataset(sessions, n_items)
