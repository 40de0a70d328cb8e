"""Dense layers, embeddings, normalizations, Adagrad and the logistic loss.

Everything is float64 numpy with hand-written backward passes. Layer objects
cache their inputs on ``forward`` and consume the cache on ``backward``;
parameter gradients accumulate into :class:`Param` objects until the
optimizer applies them.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64
LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.99
LN_EPS = 1e-5
NORM_EPS = 1e-12
ADAGRAD_EPS = 1e-6


class ShapeError(ValueError):
    """Raised when tensor shapes do not conform to a layer's declaration."""


class CacheError(RuntimeError):
    """Raised when ``backward`` runs without a matching ``forward``."""


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (seed, component name).

    Separate streams keep e.g. the student's initialization identical whether
    or not a teacher is built alongside it.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


class Param:
    """A trainable array plus its gradient.

    Dense params accumulate into ``grad``. Sparse params (embedding rows)
    collect (ids, rows) pairs, summed once per step by :func:`embedding_grad`.
    """

    __slots__ = ("name", "value", "grad", "sparse", "_ids", "_rows")

    def __init__(self, name: str, value: np.ndarray, sparse: bool = False):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.sparse = sparse
        self.grad = None if sparse else np.zeros_like(self.value)
        self._ids: list[np.ndarray] = []
        self._rows: list[np.ndarray] = []

    def add_rows(self, ids: np.ndarray, rows: np.ndarray) -> None:
        self._ids.append(np.asarray(ids, dtype=np.int64).ravel())
        self._rows.append(rows.reshape(-1, self.value.shape[1]))

    def sparse_grad(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._ids:
            return np.zeros(0, dtype=np.int64), np.zeros((0, self.value.shape[1]), dtype=DTYPE)
        ids = np.concatenate(self._ids) if len(self._ids) > 1 else self._ids[0]
        rows = np.concatenate(self._rows) if len(self._rows) > 1 else self._rows[0]
        return _sum_rows(ids, rows)

    def zero_grad(self) -> None:
        if self.sparse:
            self._ids.clear()
            self._rows.clear()
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape}, sparse={self.sparse})"


def _sum_rows(ids: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if ids.size == 0:
        return ids.astype(np.int64), np.zeros((0, rows.shape[1]), dtype=DTYPE)
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    return sorted_ids[starts], np.add.reduceat(rows[order], starts, axis=0)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

class DenseLayer:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 name: str = "dense", zero_init: bool = False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name
        if zero_init or rng is None:
            w = np.zeros((in_dim, out_dim))
        else:
            w = glorot_uniform(rng, in_dim, out_dim)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(out_dim))
        self._cache = None

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, self._cache = dense_forward(x, self)
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise CacheError(f"{self.name}: backward without forward")
        gx, gw, gb = dense_backward(grad_out, self._cache)
        self._cache = None
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


def dense_forward(x: np.ndarray, layer: DenseLayer):
    """``y = x @ W + b``; returns ``(y, cache)``."""
    w = layer.weight.value
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"{layer.name}: input {x.shape} does not match weight {w.shape}")
    if w.shape != (layer.in_dim, layer.out_dim) or layer.bias.value.shape != (layer.out_dim,):
        raise ShapeError(f"{layer.name}: parameters do not match declared {layer.in_dim}x{layer.out_dim}")
    return x @ w + layer.bias.value, (x, layer)


def dense_backward(grad_out: np.ndarray, cache):
    """Returns ``(grad_x, grad_weight, grad_bias)`` for a cached forward."""
    if cache is None:
        raise CacheError("dense_backward: missing cache")
    x, layer = cache
    if grad_out.shape != (x.shape[0], layer.out_dim):
        raise CacheError(f"{layer.name}: stale cache, grad {grad_out.shape} vs input {x.shape}")
    return grad_out @ layer.weight.value.T, x.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# activations and normalizations
# ---------------------------------------------------------------------------

def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must be in (0, 1), got {slope}")
    return np.maximum(x, slope * x)


def leaky_relu_backward(grad_out: np.ndarray, x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, grad_out, slope * grad_out)


class LeakyReLU:
    def __init__(self, slope: float = LEAKY_SLOPE):
        if not 0.0 < slope < 1.0:
            raise ValueError(f"slope must be in (0, 1), got {slope}")
        self.slope = slope
        self._x = None

    def params(self) -> list[Param]:
        return []

    def forward(self, x):
        self._x = np.where(x > 0, 1.0, self.slope)
        return x * self._x

    def backward(self, grad_out):
        if self._x is None:
            raise CacheError("LeakyReLU: backward without forward")
        g = grad_out * self._x
        self._x = None
        return g


@dataclass
class BatchNormState:
    gamma: Param
    beta: Param
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    mode: str = "train"

    @classmethod
    def create(cls, dim: int, name: str = "bn", momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> "BatchNormState":
        return cls(Param(f"{name}.gamma", np.ones(dim)), Param(f"{name}.beta", np.zeros(dim)),
                   np.zeros(dim), np.ones(dim), momentum, eps)


def batch_norm(x: np.ndarray, state: BatchNormState):
    """Batch normalization; returns ``(y, cache)``.

    Train mode normalizes with (biased) batch statistics and updates the
    running estimates; eval mode uses the running estimates only.
    """
    gamma, beta = state.gamma.value, state.beta.value
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm: input {x.shape} vs dim {gamma.shape[0]}")
    if state.mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch_norm: train mode needs batch size >= 2")
        mean = x.mean(axis=0)
        centered = x - mean
        var = (centered * centered).mean(axis=0)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mean
        state.running_var = m * state.running_var + (1.0 - m) * var
    elif state.mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown batch-norm mode {state.mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std, state.mode)


def batch_norm_backward(grad_out: np.ndarray, cache, state: BatchNormState):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, mode = cache
    g_gamma = (grad_out * xhat).sum(axis=0)
    g_beta = grad_out.sum(axis=0)
    gxhat = grad_out * state.gamma.value
    if mode == "eval":
        return gxhat * inv_std, g_gamma, g_beta
    n = grad_out.shape[0]
    gx = inv_std / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
    return gx, g_gamma, g_beta


class BatchNorm:
    def __init__(self, dim: int, name: str = "bn"):
        self.state = BatchNormState.create(dim, name)
        self._cache = None

    def params(self) -> list[Param]:
        return [self.state.gamma, self.state.beta]

    def forward(self, x):
        y, self._cache = batch_norm(x, self.state)
        return y

    def backward(self, grad_out):
        if self._cache is None:
            raise CacheError("BatchNorm: backward without forward")
        gx, gg, gb = batch_norm_backward(grad_out, self._cache, self.state)
        self._cache = None
        self.state.gamma.grad += gg
        self.state.beta.grad += gb
        return gx


class LayerNorm:
    """Per-row normalization over the last axis with learned gain and shift."""

    def __init__(self, dim: int, name: str = "ln", eps: float = LN_EPS):
        self.gain = Param(f"{name}.gain", np.ones(dim))
        self.shift = Param(f"{name}.shift", np.zeros(dim))
        self.eps = eps
        self._cache = None

    def params(self) -> list[Param]:
        return [self.gain, self.shift]

    def forward(self, x):
        centered = x - x.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + self.eps)
        xhat = centered * inv_std
        self._cache = (xhat, inv_std)
        return xhat * self.gain.value + self.shift.value

    def backward(self, grad_out):
        if self._cache is None:
            raise CacheError("LayerNorm: backward without forward")
        xhat, inv_std = self._cache
        self._cache = None
        axes = tuple(range(grad_out.ndim - 1))
        self.gain.grad += (grad_out * xhat).sum(axis=axes)
        self.shift.grad += grad_out.sum(axis=axes)
        gxhat = grad_out * self.gain.value
        d = grad_out.shape[-1]
        return inv_std / d * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                              - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))


def l2_normalize(x: np.ndarray, eps: float = NORM_EPS):
    """Row-wise ``x / max(||x||, eps)``; returns ``(y, cache)``."""
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x / denom
    return y, (y, denom, norm > eps)


def l2_normalize_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    y, denom, active = cache
    radial = np.where(active, (y * grad_out).sum(axis=-1, keepdims=True), 0.0)
    return (grad_out - y * radial) / denom


class L2Normalize:
    def __init__(self, eps: float = NORM_EPS):
        self.eps = eps
        self._cache = None

    def params(self) -> list[Param]:
        return []

    def forward(self, x):
        y, self._cache = l2_normalize(x, self.eps)
        return y

    def backward(self, grad_out):
        if self._cache is None:
            raise CacheError("L2Normalize: backward without forward")
        g = l2_normalize_backward(grad_out, self._cache)
        self._cache = None
        return g


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

class EmbeddingTable:
    """Categorical id -> dense row. Ids >= vocab_size fall back to row 0."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator | None = None,
                 name: str = "emb", init_scale: float = 0.01):
        if vocab_size < 1 or dim < 1:
            raise ValueError("embedding table needs vocab_size >= 1 and dim >= 1")
        self.vocab_size = vocab_size
        self.dim = dim
        self.name = name
        rows = (rng.uniform(-init_scale, init_scale, size=(vocab_size, dim))
                if rng is not None else np.zeros((vocab_size, dim)))
        self.rows = Param(f"{name}.rows", rows, sparse=True)
        self._ids = None

    def params(self) -> list[Param]:
        return [self.rows]

    def remap(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and ids.min() < 0:
            raise ValueError(f"{self.name}: negative id")
        return np.where(ids < self.vocab_size, ids, 0)

    def forward(self, ids) -> np.ndarray:
        ids = self.remap(ids)
        self._ids = ids
        return self.rows.value[ids]

    def backward(self, grad_out: np.ndarray) -> None:
        if self._ids is None:
            raise CacheError(f"{self.name}: backward without forward")
        self.rows.add_rows(self._ids, grad_out)
        self._ids = None


def embedding_lookup(table: EmbeddingTable, ids) -> np.ndarray:
    return table.rows.value[table.remap(ids)]


def embedding_grad(table: EmbeddingTable, ids, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sparse gradient: unique row ids and the summed upstream rows for each."""
    ids = table.remap(ids).ravel()
    return _sum_rows(ids, np.asarray(grads, dtype=DTYPE).reshape(ids.shape[0], table.dim))


# ---------------------------------------------------------------------------
# Adagrad
# ---------------------------------------------------------------------------

@dataclass
class AdagradState:
    base_lr: float = 0.01
    eps: float = ADAGRAD_EPS
    warmup_steps: int = 0
    step: int = 0
    accumulators: dict = field(default_factory=dict)

    def lr(self, step: int | None = None) -> float:
        """Learning rate for the ``step``-th update (1-based), linear warm-up."""
        step = self.step if step is None else step
        if self.warmup_steps <= 0:
            return self.base_lr
        return self.base_lr * min(1.0, step / self.warmup_steps)


def adagrad_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdagradState) -> float:
    """In-place dense Adagrad update of ``params``; returns the lr used.

    Accumulators are keyed by position in ``params``.
    """
    state.step += 1
    lr = state.lr()
    for i, (w, g) in enumerate(zip(params, grads)):
        if w.shape != g.shape:
            raise ShapeError(f"adagrad_step: param {w.shape} vs grad {g.shape}")
        acc = state.accumulators.setdefault(i, np.zeros_like(w))
        acc += g * g
        w -= lr * g / (np.sqrt(acc) + state.eps)
    return lr


class Adagrad:
    """Adagrad over a set of :class:`Param`; embedding params update sparsely.

    A parameter listed more than once (shared between models) gets a single
    accumulator, fed by the summed gradient.
    """

    def __init__(self, params: list[Param], base_lr: float = 0.01, eps: float = ADAGRAD_EPS,
                 warmup_steps: int = 0):
        seen: dict[int, Param] = {}
        for p in params:
            seen.setdefault(id(p), p)
        self.params = list(seen.values())
        self.state = AdagradState(base_lr=base_lr, eps=eps, warmup_steps=warmup_steps)
        for p in self.params:
            self.state.accumulators[id(p)] = np.zeros_like(p.value)

    def step(self) -> float:
        st = self.state
        st.step += 1
        lr = st.lr()
        for p in self.params:
            acc = st.accumulators[id(p)]
            if p.sparse:
                ids, g = p.sparse_grad()
                if ids.size:
                    a = acc[ids] + g * g
                    acc[ids] = a
                    p.value[ids] -= lr * g / (np.sqrt(a) + st.eps)
            else:
                acc += p.grad * p.grad
                p.value -= lr * p.grad / (np.sqrt(acc) + st.eps)
            p.zero_grad()
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def logistic_loss(logits, targets) -> tuple[float, np.ndarray]:
    """Mean target-weighted logistic loss and its gradient wrt the logits.

    Hard 0/1 targets give the log-loss; soft targets give the cross entropy
    against those probabilities.
    """
    f = np.asarray(logits, dtype=DTYPE).ravel()
    t = np.asarray(targets, dtype=DTYPE).ravel()
    if f.shape != t.shape:
        raise ShapeError(f"logistic_loss: {f.shape} logits vs {t.shape} targets")
    if t.size and (t.min() < 0.0 or t.max() > 1.0 or np.isnan(t).any()):
        raise ValueError("logistic_loss: targets must lie in [0, 1]")
    n = f.shape[0]
    loss = float(np.mean(t * softplus(-f) + (1.0 - t) * softplus(f)))
    return loss, (sigmoid(f) - t) / n


def binary_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=DTYPE)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(p * np.log(p) + (1 - p) * np.log1p(-p))
    return np.nan_to_num(h, nan=0.0)


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=DTYPE).ravel()
    target = np.asarray(target, dtype=DTYPE).ravel()
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.shape[0]
