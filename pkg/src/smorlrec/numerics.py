"""Minimal reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape`; outside a
tape they only compute values, which is how bootstrap targets are produced
without ever receiving gradients.
"""
from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "requires_grad", "frozen", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.frozen = False
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(value, name=None, frozen=False) -> Tensor:
    p = Tensor(value, requires_grad=not frozen, name=name)
    p.frozen = frozen
    return p


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations for one backward pass.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self):
        self._records = []
        self._grads = None

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out, inputs, backward):
        self._records.append((out, inputs, backward))

    def backward(self, loss: Tensor):
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.value)}
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self._grads = grads
        return self

    def gradient(self, params):
        """Map each parameter (dict or sequence) to its gradient.

        Frozen or unused parameters get an all-zero array of their own shape.
        """
        if self._grads is None:
            raise RuntimeError("backward() has not been called on this tape")
        items = params.items() if isinstance(params, dict) else enumerate(params)
        out = {}
        for key, p in items:
            g = None if p.frozen else self._grads.get(id(p))
            out[key] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        return out


class no_grad:
    """Suspend recording; values computed inside are constants for any tape."""

    def __enter__(self):
        _ACTIVE.append(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def _emit(value, inputs, backward) -> Tensor:
    recording = bool(_ACTIVE) and _ACTIVE[-1] is not None
    needs = recording and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        _ACTIVE[-1].record(out, inputs, backward)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives


def affine(x, W, b=None) -> Tensor:
    """x @ W + b for x of shape (d,) or (B, d), W (d, n), b (n,)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.value.ndim != 2 or x.value.ndim not in (1, 2) or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"affine: input shape {x.shape} does not conform to weight shape {W.shape}")
    inputs = [x, W]
    val = x.value @ W.value
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"affine: bias shape {b.shape} does not conform to weight shape {W.shape}")
        val = val + b.value
        inputs.append(b)

    def backward(g):
        xv = x.value
        gx = g @ W.value.T if x.requires_grad else None
        if W.requires_grad:
            gW = np.outer(xv, g) if xv.ndim == 1 else xv.T @ g
        else:
            gW = None
        grads = [gx, gW]
        if b is not None:
            grads.append((g if g.ndim == 1 else g.sum(axis=0)) if b.requires_grad else None)
        return grads

    return _emit(val, inputs, backward)


def add(a, b) -> Tensor:
    if np.isscalar(b):
        a = as_tensor(a)
        return _emit(a.value + b, [a], lambda g: [g])
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(a.value + b.value, [a, b], lambda g: [g, g])


def sub(a, b) -> Tensor:
    if np.isscalar(a):
        b = as_tensor(b)
        return _emit(a - b.value, [b], lambda g: [-g])
    if np.isscalar(b):
        a = as_tensor(a)
        return _emit(a.value - b, [a], lambda g: [g])
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit(a.value - b.value, [a, b], lambda g: [g, -g])


def mul(a, b) -> Tensor:
    if np.isscalar(b):
        a = as_tensor(a)
        return _emit(a.value * b, [a], lambda g: [g * b])
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _emit(a.value * b.value, [a, b], lambda g: [g * b.value, g * a.value])


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.value * a.value, [a], lambda g: [2.0 * a.value * g])


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _emit(s, [a], lambda g: [g * s * (1.0 - s)])


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.value)
    return _emit(t, [a], lambda g: [g * (1.0 - t * t)])


def mean(a) -> Tensor:
    a = as_tensor(a)
    size = a.value.size
    return _emit(np.asarray(a.value.mean()), [a], lambda g: [np.full(a.shape, g / size)])


def columns(a, start, stop) -> Tensor:
    """Slice ``a[..., start:stop]``."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        return [full]

    return _emit(a.value[..., start:stop], [a], backward)


def take_rows(E, idx) -> Tensor:
    """Embedding lookup: rows of E (V, d) at integer positions idx (any shape)."""
    E = as_tensor(E)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= E.shape[0]):
        raise IndexError(f"row index out of range [0, {E.shape[0] - 1}]")

    def backward(g):
        full = np.zeros_like(E.value)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, E.shape[1]))
        return [full]

    return _emit(E.value[idx], [E], backward)


def gather(a, idx) -> Tensor:
    """Pick a[b, idx[b]] from a (B, n); returns shape (B,)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    rows = np.arange(a.shape[0])

    def backward(g):
        full = np.zeros_like(a.value)
        full[rows, idx] = g
        return [full]

    return _emit(a.value[rows, idx], [a], backward)


def stack(parts) -> Tensor:
    """Stack equal-shape (B,) tensors into (B, len(parts)) columns."""
    parts = [as_tensor(p) for p in parts]
    for p in parts[1:]:
        _same_shape(parts[0], p, "stack")
    val = np.stack([p.value for p in parts], axis=-1)
    return _emit(val, parts, lambda g: [g[..., i] for i in range(len(parts))])


def log_softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, target):
    """Single-vector cross-entropy; returns (loss, d loss / d logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[-1]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} logits")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[target] -= 1.0
    return float(-logp[target]), grad


def cross_entropy(logits, targets) -> Tensor:
    """Batch-mean softmax cross-entropy of logits (B, n) against 0-based targets (B,)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    B, n = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise IndexError(f"target out of range for {n} logits")
    rows = np.arange(B)
    logp = log_softmax(logits.value)
    loss = -logp[rows, targets].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return [d * (g / B)]

    return _emit(np.asarray(loss), [logits], backward)


# ------------------------------------------------------------- verification


def grad_check(loss_fn, params, eps=1e-5, max_coords=64, seed=0) -> float:
    """Compare tape gradients with central differences.

    ``loss_fn`` takes no arguments and returns a scalar Tensor built from the
    current values of ``params``. Up to ``max_coords`` coordinates per
    trainable parameter are sampled. Returns the max of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params.values()) if isinstance(params, dict) else list(params)

    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = tape.gradient(params)
    if float(loss_fn().value) != float(loss.value):
        raise DeterminismError("loss_fn returned different values on repeated evaluation")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, p in enumerate(params):
        if p.frozen:
            continue
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = float(loss_fn().value)
            flat[c] = orig - eps
            down = float(loss_fn().value)
            flat[c] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[i].reshape(-1)[c]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


class Adam:
    """Adaptive-moment descent with bias correction over named tensors."""

    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.frozen:
                continue
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self, prefix):
        out = {}
        for k in self.params:
            out[f"{prefix}m/{k}"] = self.m[k]
            out[f"{prefix}v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays, prefix, t):
        self.t = int(t)
        for k in self.params:
            self.m[k] = arrays[f"{prefix}m/{k}"].copy()
            self.v[k] = arrays[f"{prefix}v/{k}"].copy()
