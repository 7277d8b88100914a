"""Clickstream ingestion, session preprocessing, training examples and splits."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
DATASET_MAGIC = "SMORLDS1"
EVENT_TYPES = ("click", "view", "purchase", "add_to_cart")

# raw vocabulary seen in public clickstream dumps
_EVENT_ALIASES = {
    "click": "click",
    "view": "view",
    "purchase": "purchase",
    "buy": "purchase",
    "transaction": "purchase",
    "add_to_cart": "add_to_cart",
    "addtocart": "add_to_cart",
}


class DataFormatError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class FormatDescriptor:
    """How to read a delimited event file.

    ``columns`` maps the logical fields ``session_id``, ``timestamp``,
    ``item_id`` and (optionally) ``event_type`` to header names, or to
    0-based column positions when ``header`` is False. Files without an event
    column get ``default_event`` for every row.
    """

    delimiter: str = ","
    columns: dict = field(default_factory=dict)
    header: bool = True
    default_event: str = "click"
    max_malformed_fraction: float = 0.01

    def validate(self):
        missing = {"session_id", "timestamp", "item_id"} - set(self.columns)
        if missing:
            raise DataFormatError(f"column mapping lacks {sorted(missing)}")


@dataclass
class EventLog:
    session_ids: list
    timestamps: list
    item_ids: list
    event_types: list
    malformed: int = 0

    def __len__(self):
        return len(self.item_ids)


def _parse_timestamp(raw: str) -> int:
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return int(float(raw))
    except ValueError:
        pass
    dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    return int(dt.timestamp() * 1000)


def load_events(path, fmt: FormatDescriptor) -> EventLog:
    fmt.validate()
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read event file {path}: {exc}") from exc

    log = EventLog([], [], [], [])
    first_bad = None
    total = 0
    with handle:
        reader = csv.reader(handle, delimiter=fmt.delimiter)
        positions = None
        for lineno, row in enumerate(reader, start=1):
            if positions is None:
                if fmt.header:
                    try:
                        positions = {k: row.index(v) for k, v in fmt.columns.items()}
                    except ValueError as exc:
                        raise DataFormatError(f"{path}: header {row} lacks a mapped column ({exc})") from exc
                    continue
                positions = {k: int(v) for k, v in fmt.columns.items()}
            if not row:
                continue
            total += 1
            try:
                sid = row[positions["session_id"]].strip()
                item = row[positions["item_id"]].strip()
                ts = _parse_timestamp(row[positions["timestamp"]])
                if "event_type" in positions:
                    event = _EVENT_ALIASES[row[positions["event_type"]].strip().lower()]
                else:
                    event = fmt.default_event
                if not sid or not item:
                    raise ValueError("empty identifier")
            except (IndexError, ValueError, KeyError):
                log.malformed += 1
                if first_bad is None:
                    first_bad = (lineno, fmt.delimiter.join(row))
                continue
            log.session_ids.append(sid)
            log.timestamps.append(ts)
            log.item_ids.append(item)
            log.event_types.append(event)

    if log.malformed:
        logger.warning("%s: skipped %d malformed rows of %d", path, log.malformed, total)
        if log.malformed > fmt.max_malformed_fraction * total:
            line, text = first_bad
            raise DataFormatError(
                f"{path}: {log.malformed}/{total} malformed rows exceeds threshold; first at line {line}: {text!r}"
            )
    return log


@dataclass
class PreprocessRules:
    keep_events: tuple = ("click",)
    min_item_count: int | None = None
    min_session_length: int = 3
    subsample: int | None = None
    seed: int = 0


@dataclass
class SessionDataset:
    sessions: list  # int64 arrays of dense item indices in [1, n]
    item_ids: list  # item_ids[i - 1] is the raw id of dense index i
    session_ids: list

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_clicks(self) -> int:
        return int(sum(len(s) for s in self.sessions))

    def __len__(self):
        return len(self.sessions)

    def stats(self) -> dict:
        return {"n_sequences": len(self), "n_items": self.n_items, "n_clicks": self.n_clicks}

    def __eq__(self, other):
        if not isinstance(other, SessionDataset):
            return NotImplemented
        return (
            self.item_ids == other.item_ids
            and self.session_ids == other.session_ids
            and len(self.sessions) == len(other.sessions)
            and all(np.array_equal(a, b) for a, b in zip(self.sessions, other.sessions))
        )


def _item_sort_key(item):
    return (0, int(item), item) if item.isdigit() else (1, 0, item)


def preprocess(log: EventLog, rules: PreprocessRules) -> SessionDataset:
    """Turn an event log into dense-indexed click sessions.

    Filters run as: event mapping, then item-frequency and session-length
    filtering repeated until neither removes anything, then seeded
    subsampling of whole sessions.
    """
    keep = set(rules.keep_events)
    grouped: dict[str, list] = {}
    for pos, (sid, ts, item, ev) in enumerate(zip(log.session_ids, log.timestamps, log.item_ids, log.event_types)):
        if ev in keep:
            grouped.setdefault(sid, []).append((ts, pos, item))
    sessions = {sid: [item for _, _, item in sorted(recs)] for sid, recs in grouped.items()}

    while True:
        changed = False
        if rules.min_item_count:
            counts = Counter(item for seq in sessions.values() for item in seq)
            rare = {item for item, c in counts.items() if c < rules.min_item_count}
            if rare:
                changed = True
                sessions = {sid: [i for i in seq if i not in rare] for sid, seq in sessions.items()}
        short = [sid for sid, seq in sessions.items() if len(seq) < rules.min_session_length]
        if short:
            changed = True
            for sid in short:
                del sessions[sid]
        if not changed:
            break

    order = list(sessions)
    if rules.subsample is not None and rules.subsample < len(order):
        rng = np.random.default_rng(rules.seed)
        chosen = np.sort(rng.permutation(len(order))[: rules.subsample])
        order = [order[i] for i in chosen]
    if not order:
        raise EmptyDatasetError("preprocessing left no sessions")

    items = sorted({i for sid in order for i in sessions[sid]}, key=_item_sort_key)
    index = {item: k + 1 for k, item in enumerate(items)}
    dense = [np.array([index[i] for i in sessions[sid]], dtype=np.int64) for sid in order]
    return SessionDataset(sessions=dense, item_ids=items, session_ids=order)


def dataset_to_event_log(ds: SessionDataset) -> EventLog:
    """Re-serialize a dataset as click events (timestamps are positions)."""
    log = EventLog([], [], [], [])
    for sid, seq in zip(ds.session_ids, ds.sessions):
        for t, idx in enumerate(seq):
            log.session_ids.append(sid)
            log.timestamps.append(t)
            log.item_ids.append(ds.item_ids[idx - 1])
            log.event_types.append("click")
    return log


def save_dataset(ds: SessionDataset, path) -> dict:
    """Write the line-based dataset file plus a JSON stats sidecar."""
    path = Path(path)
    lines = [DATASET_MAGIC, f"{ds.n_items}\t{len(ds)}", "\t".join(ds.item_ids)]
    for sid, seq in zip(ds.session_ids, ds.sessions):
        lines.append(sid + "\t" + " ".join(str(int(i)) for i in seq))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    stats = ds.stats()
    path.with_suffix(".stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return stats


def load_dataset(path) -> SessionDataset:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: missing {DATASET_MAGIC} header")
    n_items, n_sessions = (int(x) for x in lines[1].split("\t"))
    item_ids = lines[2].split("\t") if n_items else []
    sessions, sids = [], []
    for line in lines[3 : 3 + n_sessions]:
        sid, seq = line.split("\t")
        sids.append(sid)
        sessions.append(np.array([int(x) for x in seq.split()], dtype=np.int64))
    if len(item_ids) != n_items or len(sessions) != n_sessions:
        raise DataFormatError(f"{path}: truncated dataset file")
    return SessionDataset(sessions=sessions, item_ids=item_ids, session_ids=sids)


# ------------------------------------------------------------------ examples


class TrainingExample(NamedTuple):
    prefix: np.ndarray
    target: int
    next_prefix: np.ndarray


@dataclass
class ExampleSet:
    """Struct-of-arrays view of all (prefix, target, next_prefix) examples."""

    prefixes: np.ndarray  # (M, seq_len)
    targets: np.ndarray  # (M,)
    next_prefixes: np.ndarray  # (M, seq_len)
    session: np.ndarray  # (M,) position of the source session in the dataset

    def __len__(self):
        return len(self.targets)

    def __getitem__(self, i):
        return TrainingExample(self.prefixes[i], int(self.targets[i]), self.next_prefixes[i])

    def subset(self, rows):
        return ExampleSet(self.prefixes[rows], self.targets[rows], self.next_prefixes[rows], self.session[rows])


def _window(seq, end, seq_len):
    out = np.full(seq_len, PAD, dtype=np.int64)
    part = seq[max(0, end - seq_len) : end]
    out[seq_len - len(part) :] = part
    return out


def make_examples(dataset: SessionDataset, seq_len=10, sessions=None) -> ExampleSet:
    """One example per next-click of every session (optionally a subset)."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    which = range(len(dataset)) if sessions is None else sessions
    pre, tgt, nxt, sess = [], [], [], []
    for s in which:
        seq = dataset.sessions[s]
        for t in range(1, len(seq)):
            pre.append(_window(seq, t, seq_len))
            tgt.append(seq[t])
            nxt.append(_window(seq, t + 1, seq_len))
            sess.append(s)
    if not tgt:
        empty = np.zeros((0, seq_len), dtype=np.int64)
        return ExampleSet(empty, np.zeros(0, np.int64), empty.copy(), np.zeros(0, np.int64))
    return ExampleSet(np.array(pre), np.array(tgt, dtype=np.int64), np.array(nxt), np.array(sess, dtype=np.int64))


# -------------------------------------------------------------------- splits


@dataclass
class Fold:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


@dataclass
class SplitSet:
    folds: list
    ratio: tuple
    seed: int

    def to_json(self) -> dict:
        return {
            "ratio": list(self.ratio),
            "seed": self.seed,
            "folds": [
                {"train": f.train.tolist(), "validation": f.validation.tolist(), "test": f.test.tolist()}
                for f in self.folds
            ],
        }

    @classmethod
    def from_json(cls, blob):
        folds = [
            Fold(np.array(f["train"], dtype=np.int64), np.array(f["validation"], dtype=np.int64), np.array(f["test"], dtype=np.int64))
            for f in blob["folds"]
        ]
        return cls(folds=folds, ratio=tuple(blob["ratio"]), seed=blob["seed"])


def split(n_sessions: int, ratio=(8, 1, 1), folds=5, seed=0) -> SplitSet:
    """Session-level rotating splits.

    One seeded permutation is shared by every fold; fold k rotates it by
    k/folds of its length before cutting train | validation | test, so the
    held-out blocks of different folds do not overlap when the held-out share
    is at most 1/folds.
    """
    if folds < 1:
        raise SplitError("folds must be >= 1")
    if n_sessions < 10:
        raise SplitError(f"need at least 10 sessions to split, got {n_sessions}")
    total = sum(ratio)
    n_val = round(n_sessions * ratio[1] / total)
    n_test = round(n_sessions * ratio[2] / total)
    n_train = n_sessions - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n_sessions)
    out = []
    for k in range(folds):
        rolled = np.roll(perm, -((k * n_sessions) // folds))
        out.append(
            Fold(
                train=np.sort(rolled[:n_train]),
                validation=np.sort(rolled[n_train : n_train + n_val]),
                test=np.sort(rolled[n_train + n_val :]),
            )
        )
    return SplitSet(folds=out, ratio=tuple(ratio), seed=seed)


# ---------------------------------------------------------------- popularity


@dataclass
class ItemCatalog:
    popularity: np.ndarray  # (n + 1,), index 0 is the pad and stays 0
    popular: np.ndarray  # bool mask (n + 1,)
    x_percent: float

    @property
    def n_items(self):
        return len(self.popularity) - 1

    @property
    def popular_set(self):
        return set(np.flatnonzero(self.popular).tolist())

    def long_tail(self) -> np.ndarray:
        items = np.arange(1, self.n_items + 1)
        return items[~self.popular[1:]]


def popularity_stats(train_sessions, n_items, x_percent=10.0) -> ItemCatalog:
    counts = np.zeros(n_items + 1, dtype=np.int64)
    for seq in train_sessions:
        np.add.at(counts, np.asarray(seq), 1)
    counts[PAD] = 0
    size = math.ceil(n_items * x_percent / 100 - 1e-9)
    size = min(max(size, 0), n_items)
    items = np.arange(1, n_items + 1)
    # count descending, index ascending
    order = np.lexsort((items, -counts[1:]))
    popular = np.zeros(n_items + 1, dtype=bool)
    popular[items[order[:size]]] = True
    return ItemCatalog(popularity=counts, popular=popular, x_percent=float(x_percent))
