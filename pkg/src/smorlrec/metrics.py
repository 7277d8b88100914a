"""Accuracy, coverage and repetitiveness metrics over ranked recommendation lists.

Ranked lists are integer arrays (M, K) of 1-based item indices, best first.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import ExampleSet, ItemCatalog
from .encoder import EncoderModel, last_items, top_k_items
from .rewards import diversity_rewards, novelty_rewards

KS = (1, 5, 10, 20)
REPETITION_KS = (5, 10, 20)


class UndefinedMetricError(ValueError):
    pass


def _check(ranked, targets):
    ranked = np.asarray(ranked)
    if ranked.shape[0] == 0:
        raise UndefinedMetricError("metric undefined on an empty test set")
    if targets is not None and len(targets) != ranked.shape[0]:
        raise ValueError("one ranked list per target required")
    return ranked


def _hit_ranks(ranked, targets, k):
    """1-based rank of each target within the top-k, 0 when absent."""
    top = ranked[:, :k] == np.asarray(targets)[:, None]
    found = top.any(axis=1)
    return np.where(found, top.argmax(axis=1) + 1, 0)


def hr_at_k(ranked, targets, k) -> float:
    ranked = _check(ranked, targets)
    return float(np.mean(_hit_ranks(ranked, targets, k) > 0))


def ndcg_at_k(ranked, targets, k) -> float:
    ranked = _check(ranked, targets)
    rank = _hit_ranks(ranked, targets, k)
    gains = np.where(rank > 0, 1.0 / np.log2(np.maximum(rank, 1) + 1), 0.0)
    # correctly rounded sum, so the value does not depend on example order
    return math.fsum(gains) / len(gains)


def coverage_at_k(ranked, universe, k) -> float:
    universe = np.unique(np.asarray(universe))
    if universe.size == 0:
        raise UndefinedMetricError("coverage over an empty item universe")
    ranked = np.asarray(ranked)
    shown = np.unique(ranked[:, :k]) if ranked.size else np.zeros(0, dtype=np.int64)
    return float(np.isin(universe, shown).sum() / universe.size)


def repetitiveness_at_k(session_lists, k) -> float:
    """Mean over sessions of (top-k slots shown) - (distinct items shown).

    ``session_lists`` is a sequence with one (T_i, K) array per session.
    """
    session_lists = list(session_lists)
    if not session_lists:
        raise UndefinedMetricError("repetitiveness needs at least one session")
    reps = []
    for lists in session_lists:
        top = np.asarray(lists)[:, :k]
        reps.append(top.size - np.unique(top).size)
    return float(np.mean(reps))


def cumulative_rewards(last, top1, e_div, catalog: ItemCatalog):
    """(sum of diversity rewards, sum of novelty rewards) over test examples."""
    sum_div = 0.0 if e_div is None else float(diversity_rewards(last, top1, e_div).sum())
    sum_nov = float(novelty_rewards(top1, catalog).sum())
    return sum_div, sum_nov


def group_by_session(ranked, sessions):
    """Split ranked lists into per-session arrays, keeping example order."""
    sessions = np.asarray(sessions)
    order = np.argsort(sessions, kind="stable")
    bounds = np.flatnonzero(np.diff(sessions[order])) + 1
    return [ranked[idx] for idx in np.split(order, bounds)] if len(order) else []


@dataclass
class MetricsReport:
    hr: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    cv_all: dict = field(default_factory=dict)
    cv_longtail: dict = field(default_factory=dict)
    repetitiveness: dict = field(default_factory=dict)
    cumulative_diversity_reward: float = 0.0
    cumulative_novelty_reward: float = 0.0
    n_examples: int = 0
    n_sessions: int = 0

    def columns(self) -> dict:
        row = {}
        for k in sorted(self.hr):
            row[f"hr@{k}"] = self.hr[k]
        for k in sorted(self.ndcg):
            row[f"ndcg@{k}"] = self.ndcg[k]
        for k in sorted(self.cv_all):
            row[f"cv@{k}"] = self.cv_all[k]
        for k in sorted(self.cv_longtail):
            row[f"cv_longtail@{k}"] = self.cv_longtail[k]
        for k in sorted(self.repetitiveness):
            row[f"r@{k}"] = self.repetitiveness[k]
        row["cum_div_reward"] = self.cumulative_diversity_reward
        row["cum_nov_reward"] = self.cumulative_novelty_reward
        row["n_examples"] = self.n_examples
        row["n_sessions"] = self.n_sessions
        return row

    def to_json(self) -> str:
        return json.dumps(self.columns(), indent=2) + "\n"

    @classmethod
    def from_columns(cls, row: dict) -> "MetricsReport":
        rep = cls()
        targets = {"hr": rep.hr, "ndcg": rep.ndcg, "cv": rep.cv_all, "cv_longtail": rep.cv_longtail, "r": rep.repetitiveness}
        for key, val in row.items():
            if "@" in key:
                name, k = key.split("@")
                targets[name][int(k)] = float(val)
        rep.cumulative_diversity_reward = float(row["cum_div_reward"])
        rep.cumulative_novelty_reward = float(row["cum_nov_reward"])
        rep.n_examples = int(row["n_examples"])
        rep.n_sessions = int(row["n_sessions"])
        return rep

    def check_invariants(self):
        for name in ("hr", "ndcg", "cv_all", "cv_longtail"):
            vals = [getattr(self, name)[k] for k in sorted(getattr(self, name))]
            if any(v < 0 or v > 1 for v in vals) or any(b < a for a, b in zip(vals, vals[1:])):
                raise AssertionError(f"{name} violates [0,1] bounds or monotonicity in k: {vals}")
        for k in self.ndcg:
            if self.ndcg[k] > self.hr[k] + 1e-12:
                raise AssertionError(f"ndcg@{k} exceeds hr@{k}")
        if any(v < 0 for v in self.repetitiveness.values()):
            raise AssertionError("negative repetitiveness")


def report_from_lists(ranked, targets, sessions, last, catalog, e_div, ks=KS, rep_ks=REPETITION_KS) -> MetricsReport:
    ranked = _check(ranked, targets)
    n = catalog.n_items
    everything = np.arange(1, n + 1)
    tail = catalog.long_tail()
    rep = MetricsReport()
    for k in ks:
        rep.hr[k] = hr_at_k(ranked, targets, k)
        rep.ndcg[k] = ndcg_at_k(ranked, targets, k)
        rep.cv_all[k] = coverage_at_k(ranked, everything, k)
        rep.cv_longtail[k] = coverage_at_k(ranked, tail, k) if tail.size else 0.0
    grouped = group_by_session(ranked, sessions)
    for k in rep_ks:
        rep.repetitiveness[k] = repetitiveness_at_k(grouped, k)
    rep.cumulative_diversity_reward, rep.cumulative_novelty_reward = cumulative_rewards(last, ranked[:, 0], e_div, catalog)
    rep.n_examples = int(ranked.shape[0])
    rep.n_sessions = len(grouped)
    return rep


def evaluate(model: EncoderModel, examples: ExampleSet, catalog: ItemCatalog, e_div=None, ks=KS, rep_ks=REPETITION_KS) -> MetricsReport:
    """Rank with the supervised head and fill every report field."""
    if len(examples) == 0:
        raise UndefinedMetricError("evaluation split has no examples")
    # a list longer than the catalog is the whole catalog
    depth = min(max(max(ks), max(rep_ks)), catalog.n_items)
    ranked = top_k_items(model.logits(examples.prefixes), depth)
    rep = report_from_lists(ranked, examples.targets, examples.session, last_items(examples.prefixes), catalog, e_div, ks, rep_ks)
    rep.check_invariants()
    return rep


def reports_to_csv(rows) -> str:
    """rows: iterable of (key dict, MetricsReport); keys come first in each line."""
    rows = list(rows)
    buf = io.StringIO()
    if not rows:
        return ""
    keys, first = rows[0]
    writer = csv.DictWriter(buf, fieldnames=list(keys) + list(first.columns()), lineterminator="\n")
    writer.writeheader()
    for keys, rep in rows:
        writer.writerow({**keys, **{k: _fmt(v) for k, v in rep.columns().items()}})
    return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def mean_report(reports) -> MetricsReport:
    reports = list(reports)
    cols = [r.columns() for r in reports]
    avg = {k: float(np.mean([c[k] for c in cols])) for k in cols[0]}
    out = MetricsReport.from_columns({**avg, "n_examples": 0, "n_sessions": 0})
    out.n_examples = int(sum(c["n_examples"] for c in cols))
    out.n_sessions = int(sum(c["n_sessions"] for c in cols))
    return out
