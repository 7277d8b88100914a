"""Scalarized multi-objective Q-learning head and the alternating double-Q trainer."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ExampleSet, ItemCatalog
from .encoder import (
    HIDDEN_SIZE,
    BatchSampler,
    EncoderModel,
    TrainingError,
    _fan_in_uniform,
    last_items,
    rng_streams,
)
from .metrics import evaluate
from .rewards import OBJECTIVES, stack_rewards

logger = logging.getLogger(__name__)


class SmorlHead:
    """One affine Q layer per objective; identity output activation."""

    def __init__(self, n_items, rng=None, hidden_size=HIDDEN_SIZE, w=(1.0, 1.0, 1.0), gamma=0.5, alpha=1.0):
        if not 0.0 <= gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
        if alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {alpha}")
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (3,) or np.any(w < 0):
            raise ValueError(f"w must be three non-negative weights, got {w}")
        rng = np.random.default_rng(rng)
        self.n_items = n_items
        self.w, self.gamma, self.alpha = w, gamma, alpha
        self.params = {}
        for z in OBJECTIVES:
            self.params[f"q_{z}_w"] = nx.parameter(_fan_in_uniform(rng, hidden_size, (hidden_size, n_items)), f"q_{z}_w")
            self.params[f"q_{z}_b"] = nx.parameter(np.zeros(n_items), f"q_{z}_b")

    def clone(self) -> "SmorlHead":
        other = object.__new__(SmorlHead)
        other.n_items, other.w, other.gamma, other.alpha = self.n_items, self.w.copy(), self.gamma, self.alpha
        other.params = {k: nx.parameter(p.value.copy(), k) for k, p in self.params.items()}
        return other

    def q_tensors(self, state):
        return [nx.affine(state, self.params[f"q_{z}_w"], self.params[f"q_{z}_b"]) for z in OBJECTIVES]

    def q_taken(self, state, actions) -> nx.Tensor:
        """Q(s, a) for 1-based logged actions, shape (B, 3)."""
        return nx.stack([nx.gather(q, np.asarray(actions) - 1) for q in self.q_tensors(state)])


def q_forward(state, head: SmorlHead) -> np.ndarray:
    """QMatrix: (n, 3) for one state, (B, n, 3) for a batch; columns [acc, div, nov]."""
    with nx.no_grad():
        cols = [q.value for q in head.q_tensors(np.asarray(state, dtype=np.float64))]
    return np.stack(cols, axis=-1)


def scalarize(q_row, w) -> float:
    q_row, w = np.asarray(q_row, dtype=np.float64), np.asarray(w, dtype=np.float64)
    if q_row.shape != w.shape:
        raise nx.DimensionError(f"scalarize: {q_row.shape} vs {w.shape}")
    return float(q_row @ w)


def select_action(Q, w):
    """Argmax over actions of Q @ w, lowest item index on ties; 1-based result."""
    scores = np.asarray(Q) @ np.asarray(w, dtype=np.float64)
    return np.argmax(scores, axis=-1) + 1


def sdql_loss(q_taken, rewards, q_boot, w, gamma):
    """Batch mean of (w . (r + gamma * Q_boot(s', a*) - Q(s, a)))^2.

    ``q_boot`` is a constant array; ``q_taken`` may be a Tensor (result is a
    Tensor) or a plain array (result is a float).
    """
    target = np.asarray(rewards, dtype=np.float64) + gamma * np.asarray(q_boot, dtype=np.float64)
    bad = ~np.all(np.isfinite(target), axis=-1)
    if np.any(bad):
        raise TrainingError(f"non-finite SDQL target at batch index {int(np.argmax(bad))}")
    w_col = np.asarray(w, dtype=np.float64).reshape(3, 1)
    if not isinstance(q_taken, nx.Tensor):
        td = (target - np.asarray(q_taken)) @ w_col
        return float(np.mean(td**2))
    td = nx.affine(nx.sub(target, q_taken), w_col)
    loss = nx.mean(nx.square(td))
    if not np.isfinite(loss.value):
        raise TrainingError("non-finite SDQL loss at batch index " + str(int(np.argmax(~np.isfinite(td.value[:, 0])))))
    return loss


@dataclass
class Agent:
    model: EncoderModel
    head: SmorlHead

    @property
    def params(self):
        return {**self.model.params, **self.head.params}

    def clone(self):
        return Agent(self.model.clone(), self.head.clone())


@dataclass
class SmorlConfig:
    w: tuple = (1.0, 1.0, 1.0)
    gamma: float = 0.5
    alpha: float = 1.0
    lr: float = 0.01
    batch_size: int = 256
    max_steps: int = 10_000
    eval_every: int = 5000
    seed: int = 0


@dataclass
class StepResult:
    loss_s: float
    loss_sdql: float
    loss_smorl: float
    branch: int


def smorl_losses(batch: ExampleSet, upd: Agent, other: Agent, w, gamma, alpha, catalog, e_div):
    """(L_s, L_SDQL, L_SMORL) Tensors for one branch of the double-Q scheme.

    ``upd`` is the copy being trained: it provides Q(s_t, a_t), the greedy
    next action a* and the supervised top-1 prediction used for the diversity
    and novelty rewards. ``other`` only provides the bootstrap value at a*.
    """
    w = np.asarray(w, dtype=np.float64)
    with nx.no_grad():
        q_next = q_forward(upd.model.encode_tensor(batch.next_prefixes).value, upd.head)
        a_star = select_action(q_next, w)
        q_next_other = q_forward(other.model.encode_tensor(batch.next_prefixes).value, other.head)
        q_boot = q_next_other[np.arange(len(a_star)), a_star - 1]

    state = upd.model.encode_tensor(batch.prefixes)
    logits = upd.model.decode_tensor(state)
    loss_s = nx.cross_entropy(logits, batch.targets - 1)
    pred = np.argmax(logits.value, axis=-1) + 1
    rewards = stack_rewards(batch.targets, last_items(batch.prefixes), pred, e_div, catalog)
    loss_q = sdql_loss(upd.head.q_taken(state, batch.targets), rewards, q_boot, w, gamma)
    total = nx.add(loss_s, nx.mul(loss_q, float(alpha)))
    return loss_s, loss_q, total


class TrainerState:
    """Both parameter copies, their optimizers, the batch sampler and the branch RNG."""

    def __init__(self, n_items, n_examples, config: SmorlConfig):
        streams = rng_streams(config.seed)
        model = EncoderModel(n_items, rng=streams["model"])
        head = SmorlHead(n_items, streams["head"], w=config.w, gamma=config.gamma, alpha=config.alpha)
        online = Agent(model, head)
        self.copies = [online, online.clone()]
        self.optimizers = [nx.Adam(c.params, lr=config.lr) for c in self.copies]
        self.sampler = BatchSampler(n_examples, config.batch_size, streams["sampler"])
        self.coin = streams["coin"]
        self.step = 0
        self.branch_counts = [0, 0]
        self.best_score = -np.inf
        self.best_step = -1
        self.best_arrays = None

    @property
    def online(self) -> Agent:
        return self.copies[0]

    def save(self, path, meta=None):
        arrays = {}
        for i, (copy, opt) in enumerate(zip(self.copies, self.optimizers)):
            arrays.update({f"copy{i}/{k}": p.value for k, p in copy.params.items()})
            arrays.update(opt.state_arrays(f"adam{i}/"))
        sampler = self.sampler.state()
        arrays["sampler/perm"] = sampler["perm"]
        if self.best_arrays is not None:
            arrays.update({f"best/{k}": v for k, v in self.best_arrays.items()})
        info = {
            "step": self.step,
            "branch_counts": self.branch_counts,
            "adam_t": [o.t for o in self.optimizers],
            "sampler_cursor": sampler["cursor"],
            "sampler_rng": sampler["rng"],
            "coin_rng": self.coin.bit_generator.state,
            "best_score": None if self.best_arrays is None else self.best_score,
            "best_step": self.best_step,
            **(meta or {}),
        }
        save_checkpoint(path, arrays, info)

    @classmethod
    def load(cls, path, n_items, n_examples, config: SmorlConfig):
        arrays, info = load_checkpoint(path)
        state = cls(n_items, n_examples, config)
        for i, (copy, opt) in enumerate(zip(state.copies, state.optimizers)):
            for k, p in copy.params.items():
                p.value = arrays[f"copy{i}/{k}"].copy()
            opt.load_state_arrays(arrays, f"adam{i}/", info["adam_t"][i])
        state.sampler.restore(arrays["sampler/perm"], info["sampler_cursor"], info["sampler_rng"])
        state.coin.bit_generator.state = info["coin_rng"]
        state.step = info["step"]
        state.branch_counts = list(info["branch_counts"])
        state.best_step = info["best_step"]
        if info["best_score"] is not None:
            state.best_score = info["best_score"]
            state.best_arrays = {k[5:]: v for k, v in arrays.items() if k.startswith("best/")}
        return state


def smorl_step(batch: ExampleSet, trainer: TrainerState, config: SmorlConfig, catalog: ItemCatalog | None, e_div=None) -> StepResult:
    """One update of alternating double-Q training.

    A uniform draw picks which copy is trained this step. With alpha == 0 the
    objective is the supervised loss alone and the online copy is always the
    one updated, so the run is a plain supervised run.
    """
    z = trainer.coin.random()
    if config.alpha == 0:
        branch = 0
        upd = trainer.copies[0]
        with nx.Tape() as tape:
            state = upd.model.encode_tensor(batch.prefixes)
            total = nx.cross_entropy(upd.model.decode_tensor(state), batch.targets - 1)
        loss_s = loss_q = None
    else:
        branch = 0 if z < 0.5 else 1
        upd, other = trainer.copies[branch], trainer.copies[1 - branch]
        with nx.Tape() as tape:
            loss_s, loss_q, total = smorl_losses(batch, upd, other, config.w, config.gamma, config.alpha, catalog, e_div)
    value = float(total.value)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at step {trainer.step}")
    tape.backward(total)
    trainer.optimizers[branch].step(tape.gradient(upd.params))
    trainer.step += 1
    trainer.branch_counts[branch] += 1
    if loss_s is None:
        return StepResult(value, 0.0, value, branch)
    return StepResult(float(loss_s.value), float(loss_q.value), value, branch)


@dataclass
class TrainResult:
    model: EncoderModel
    head: SmorlHead
    log: list = field(default_factory=list)
    trainer: TrainerState | None = None
    best_step: int = -1


def _snapshot(agent: Agent):
    return {k: p.value.copy() for k, p in agent.model.params.items()}


def train(
    train_examples: ExampleSet,
    n_items: int,
    config: SmorlConfig,
    catalog: ItemCatalog | None = None,
    e_div=None,
    valid_examples: ExampleSet | None = None,
    trainer: TrainerState | None = None,
    on_record=None,
    checkpoint_every: int = 0,
    checkpoint_path=None,
) -> TrainResult:
    """Run smorl_step over shuffled mini-batches up to ``config.max_steps``.

    Validation runs every ``eval_every`` steps and after the final step; the
    online copy with the best validation NDCG@20 is returned. Passing a
    restored ``trainer`` resumes from its step counter.
    """
    if config.alpha > 0 and catalog is None:
        raise ValueError("a popularity catalog is required when alpha > 0")
    if trainer is None:
        trainer = TrainerState(n_items, len(train_examples), config)
    log = []

    def emit(rec):
        log.append(rec)
        if on_record is not None:
            on_record(rec)

    def validate():
        rep = evaluate(trainer.online.model, valid_examples, catalog, e_div)
        score = rep.ndcg[20]
        if score > trainer.best_score:
            trainer.best_score, trainer.best_step = score, trainer.step
            trainer.best_arrays = _snapshot(trainer.online)
        return rep

    last_eval = -1
    while trainer.step < config.max_steps:
        batch = train_examples.subset(trainer.sampler.next())
        res = smorl_step(batch, trainer, config, catalog, e_div)
        rec = {"step": trainer.step, "L_s": res.loss_s, "L_SDQL": res.loss_sdql, "L_SMORL": res.loss_smorl, "branch": res.branch + 1}
        if valid_examples is not None and config.eval_every and trainer.step % config.eval_every == 0:
            rec["validation"] = validate().columns()
            last_eval = trainer.step
        emit(rec)
        if checkpoint_every and checkpoint_path and trainer.step % checkpoint_every == 0:
            trainer.save(checkpoint_path)
    if valid_examples is not None and trainer.step > 0 and last_eval != trainer.step and config.eval_every:
        emit({"step": trainer.step, "validation": validate().columns()})

    model = trainer.online.model.clone()
    if trainer.best_arrays is not None:
        model.load_arrays(trainer.best_arrays)
    return TrainResult(model=model, head=trainer.online.head, log=log, trainer=trainer, best_step=trainer.best_step)


def is_sqn_equivalent(w) -> bool:
    w = np.asarray(w, dtype=np.float64)
    return bool(w[0] > 0 and w[1] == 0 and w[2] == 0)
