"""GRU session encoder with a fully connected next-item decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import PAD, ExampleSet

EMBED_SIZE = 64
HIDDEN_SIZE = 64


class TrainingError(RuntimeError):
    pass


def rng_streams(seed: int):
    """Independent generators for model init, head init, batching and branch coins."""
    model, head, sampler, coin = np.random.SeedSequence(seed).spawn(4)
    return {
        "model": np.random.default_rng(model),
        "head": np.random.default_rng(head),
        "sampler": np.random.default_rng(sampler),
        "coin": np.random.default_rng(coin),
    }


def _fan_in_uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EncoderModel:
    """Item embedding, single-layer GRU and decoder over ``n_items`` candidates.

    GRU gate layout along the 3*hidden axis is [update | reset | candidate].
    """

    def __init__(self, n_items, rng=None, embed_size=EMBED_SIZE, hidden_size=HIDDEN_SIZE, frozen_embedding=None):
        rng = np.random.default_rng(rng)
        self.n_items = n_items
        self.embed_size = embed_size
        self.hidden_size = hidden_size
        h = hidden_size
        if frozen_embedding is not None:
            emb = nx.parameter(np.array(frozen_embedding, dtype=np.float64), "embedding", frozen=True)
        else:
            emb = nx.parameter(rng.uniform(-0.05, 0.05, size=(n_items + 1, embed_size)), "embedding")
        self.params = {
            "embedding": emb,
            "gru_wx": nx.parameter(_fan_in_uniform(rng, embed_size, (embed_size, 3 * h)), "gru_wx"),
            "gru_bx": nx.parameter(np.zeros(3 * h), "gru_bx"),
            "gru_uzr": nx.parameter(_fan_in_uniform(rng, h, (h, 2 * h)), "gru_uzr"),
            "gru_uc": nx.parameter(_fan_in_uniform(rng, h, (h, h)), "gru_uc"),
            "decoder_w": nx.parameter(_fan_in_uniform(rng, h, (h, n_items)), "decoder_w"),
            "decoder_b": nx.parameter(np.zeros(n_items), "decoder_b"),
        }

    def clone(self) -> "EncoderModel":
        other = object.__new__(EncoderModel)
        other.n_items, other.embed_size, other.hidden_size = self.n_items, self.embed_size, self.hidden_size
        other.params = {}
        for k, p in self.params.items():
            q = nx.parameter(p.value.copy(), k, frozen=p.frozen)
            other.params[k] = q
        return other

    def arrays(self, prefix=""):
        return {prefix + k: p.value for k, p in self.params.items()}

    def load_arrays(self, arrays, prefix=""):
        for k, p in self.params.items():
            arr = arrays[prefix + k]
            if arr.shape != p.shape:
                raise nx.DimensionError(f"{prefix + k}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.value = np.array(arr, dtype=np.float64)

    def encode_tensor(self, prefixes) -> nx.Tensor:
        """Final GRU state (B, hidden) for integer prefixes (B, L)."""
        prefixes = np.asarray(prefixes)
        if prefixes.min() < 0 or prefixes.max() > self.n_items:
            raise IndexError(f"item index outside [0, {self.n_items}]")
        p = self.params
        h = self.hidden_size
        state = nx.Tensor(np.zeros((prefixes.shape[0], h)))
        for t in range(prefixes.shape[1]):
            x = nx.take_rows(p["embedding"], prefixes[:, t])
            gx = nx.affine(x, p["gru_wx"], p["gru_bx"])
            gh = nx.affine(state, p["gru_uzr"])
            z = nx.sigmoid(nx.add(nx.columns(gx, 0, h), nx.columns(gh, 0, h)))
            r = nx.sigmoid(nx.add(nx.columns(gx, h, 2 * h), nx.columns(gh, h, 2 * h)))
            cand = nx.tanh(nx.add(nx.columns(gx, 2 * h, 3 * h), nx.affine(nx.mul(r, state), p["gru_uc"])))
            state = nx.add(state, nx.mul(z, nx.sub(cand, state)))
        return state

    def decode_tensor(self, state) -> nx.Tensor:
        return nx.affine(state, self.params["decoder_w"], self.params["decoder_b"])

    def logits(self, prefixes, chunk=2048) -> np.ndarray:
        prefixes = np.asarray(prefixes)
        out = [self.decode_tensor(self.encode_tensor(prefixes[i : i + chunk])).value for i in range(0, len(prefixes), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.n_items))


def encode(prefix, model: EncoderModel) -> np.ndarray:
    prefix = np.asarray(prefix)
    if prefix.ndim == 1:
        return model.encode_tensor(prefix[None, :]).value[0]
    return model.encode_tensor(prefix).value


def decode_logits(state, model: EncoderModel) -> np.ndarray:
    return model.decode_tensor(np.asarray(state, dtype=np.float64)).value


@dataclass
class RankedList:
    items: np.ndarray  # 1-based item indices
    scores: np.ndarray


def top_k_items(scores, k) -> np.ndarray:
    """Top-k 1-based item indices per row; ties resolved by ascending index."""
    scores = np.asarray(scores)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return order + 1


def top_k(y, k) -> RankedList:
    y = np.asarray(y, dtype=np.float64)
    items = top_k_items(y, k)
    return RankedList(items=items, scores=y[items - 1])


# ------------------------------------------------------------------ training


class BatchSampler:
    """Epoch-wise shuffled mini-batches over example rows; the last partial batch is dropped."""

    def __init__(self, n_rows, batch_size, rng):
        self.n_rows = n_rows
        self.batch_size = min(batch_size, n_rows)
        self.rng = rng
        self.perm = None
        self.cursor = 0

    def next(self) -> np.ndarray:
        if self.perm is None or self.cursor + self.batch_size > self.n_rows:
            self.perm = self.rng.permutation(self.n_rows)
            self.cursor = 0
        rows = self.perm[self.cursor : self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return rows

    def state(self):
        perm = np.zeros(0, dtype=np.int64) if self.perm is None else self.perm
        return {"perm": perm, "cursor": self.cursor, "rng": self.rng.bit_generator.state}

    def restore(self, perm, cursor, rng_state):
        self.perm = None if len(perm) == 0 else np.asarray(perm, dtype=np.int64)
        self.cursor = int(cursor)
        self.rng.bit_generator.state = rng_state


def supervised_loss(model: EncoderModel, batch: ExampleSet):
    state = model.encode_tensor(batch.prefixes)
    logits = model.decode_tensor(state)
    return nx.cross_entropy(logits, batch.targets - 1)


def supervised_step(model: EncoderModel, optimizer: nx.Adam, batch: ExampleSet) -> float:
    with nx.Tape() as tape:
        loss = supervised_loss(model, batch)
    value = float(loss.value)
    if not np.isfinite(value):
        raise TrainingError(f"supervised loss diverged ({value})")
    tape.backward(loss)
    optimizer.step(tape.gradient(model.params))
    return value


@dataclass
class SupervisedConfig:
    steps: int = 1000
    batch_size: int = 256
    lr: float = 0.01
    seed: int = 0


def train_supervised(examples: ExampleSet, n_items: int, config: SupervisedConfig):
    """Plain cross-entropy training; returns (model, per-step losses)."""
    streams = rng_streams(config.seed)
    model = EncoderModel(n_items, rng=streams["model"])
    optimizer = nx.Adam(model.params, lr=config.lr)
    sampler = BatchSampler(len(examples), config.batch_size, streams["sampler"])
    losses = []
    for _ in range(config.steps):
        losses.append(supervised_step(model, optimizer, examples.subset(sampler.next())))
    return model, losses


def pretrain_diversity_embedding(train_examples: ExampleSet, n_items: int, config: SupervisedConfig) -> np.ndarray:
    """Embedding matrix (n + 1, 64) of a supervised-only run, for the diversity reward."""
    model, _ = train_supervised(train_examples, n_items, config)
    emb = model.params["embedding"].value.copy()
    if not np.all(np.isfinite(emb)):
        raise TrainingError("diversity embedding pretraining produced non-finite weights")
    emb.setflags(write=False)
    return emb


def last_items(prefixes) -> np.ndarray:
    """Most recent real item of each left-padded prefix."""
    last = np.asarray(prefixes)[..., -1]
    if np.any(last == PAD):
        raise ValueError("prefix contains no real item")
    return last
