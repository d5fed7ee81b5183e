"""Layer primitives with explicit forward/backward passes.

Every forward function returns ``(output, cache)``; the matching backward
consumes the cache exactly once.  Matrices are 2-D float64 numpy arrays in
row-major (C) order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class DimensionError(ValueError):
    pass


class CacheReuseError(RuntimeError):
    pass


class LayerCache:
    """Forward activations saved for one backward call."""

    def __init__(self, kind: str, **saved):
        self.kind = kind
        self.saved = saved
        self.used = False

    def take(self, kind: str) -> dict:
        if self.kind != kind:
            raise TypeError(f"cache from {self.kind!r} passed to {kind} backward")
        if self.used:
            raise CacheReuseError(f"{kind} cache already consumed by a backward pass")
        self.used = True
        return self.saved


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionError(f"expected a matrix, got array of shape {x.shape}")
    return x


# --------------------------------------------------------------------- fc

def fc_forward(x, weight, bias=None):
    """``x @ weight + bias``; ``bias=None`` for a bias-free layer (followed by batchnorm)."""
    x = as_matrix(x)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"fc input {x.shape} does not conform to weight {weight.shape}")
    out = x @ weight
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"fc bias {bias.shape} does not match weight {weight.shape}")
        out += bias
    return out, LayerCache("fc", x=x, weight=weight, has_bias=bias is not None)


def fc_backward(dout, cache: LayerCache):
    """Return ``(dx, dweight, dbias)``; ``dbias`` is None for a bias-free layer."""
    s = cache.take("fc")
    dx = dout @ s["weight"].T
    dw = s["x"].T @ dout
    db = np.ones(dout.shape[0]) @ dout if s["has_bias"] else None
    return dx, dw, db


# -------------------------------------------------------------- batchnorm

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, dim: int, momentum: float = BN_MOMENTUM) -> "RunningStats":
        return cls(np.zeros(dim), np.ones(dim), momentum)


def batchnorm_forward(x, gamma, beta, stats: RunningStats, mode: str = "train",
                      eps: float = BN_EPS):
    """Per-column standardization followed by the affine ``gamma``/``beta``.

    Train mode normalizes with the batch mean and population variance and
    folds them into ``stats`` by exponential moving average (in place).
    Infer mode reads ``stats`` only.
    """
    x = as_matrix(x)
    if eps <= 0:
        raise ValueError("batchnorm eps must be positive")
    if x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise DimensionError(
            f"batchnorm input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2 rows")
        ones = np.ones(n)
        mean = (ones @ x) / n
        xhat = x - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / n
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat *= inv_std
        m = stats.momentum
        stats.mean = m * stats.mean + (1.0 - m) * mean
        stats.var = m * stats.var + (1.0 - m) * var
    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x - stats.mean) * inv_std
    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = xhat * gamma
    out += beta
    return out, LayerCache("bn", xhat=xhat, inv_std=inv_std, gamma=gamma, mode=mode)


def batchnorm_backward(dout, cache: LayerCache):
    """Return ``(dx, dgamma, dbeta)``."""
    s = cache.take("bn")
    xhat, inv_std, gamma = s["xhat"], s["inv_std"], s["gamma"]
    n = dout.shape[0]
    dgamma = np.einsum("ij,ij->j", dout, xhat)
    dbeta = np.ones(n) @ dout
    if s["mode"] == "infer":
        return dout * (gamma * inv_std), dgamma, dbeta
    dx = xhat * (dgamma / n)
    np.subtract(dout, dx, out=dx)
    dx -= dbeta / n
    dx *= gamma * inv_std
    return dx, dgamma, dbeta


# --------------------------------------------------------- elementwise

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_forward(x):
    out = sigmoid(x)
    return out, LayerCache("sigmoid", out=out)


def sigmoid_backward(dout, cache: LayerCache):
    out = cache.take("sigmoid")["out"]
    return dout * out * (1.0 - out)


def glu_forward(x):
    x = as_matrix(x)
    if x.shape[1] % 2:
        raise DimensionError(f"glu needs an even column count, got {x.shape}")
    k = x.shape[1] // 2
    value, gate = x[:, :k], sigmoid(x[:, k:])
    return value * gate, LayerCache("glu", value=value, gate=gate)


def glu_backward(dout, cache: LayerCache):
    s = cache.take("glu")
    value, gate = s["value"], s["gate"]
    dvalue = dout * gate
    dgate = dout * value * gate * (1.0 - gate)
    return np.concatenate([dvalue, dgate], axis=1)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), LayerCache("relu", positive=x > 0)


def relu_backward(dout, cache: LayerCache):
    return dout * cache.take("relu")["positive"]


def softmax_rows(x):
    x = as_matrix(x)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_forward(x):
    out = softmax_rows(x)
    return out, LayerCache("softmax", out=out)


def softmax_backward(dout, cache: LayerCache):
    p = cache.take("softmax")["out"]
    return p * (dout - (dout * p).sum(axis=1, keepdims=True))


# --------------------------------------------------------------- sparsemax

def sparsemax(z, allowed=None):
    """Euclidean projection of each row of ``z`` onto the probability simplex.

    Accepts a vector or a matrix; returns the same shape.  ``allowed`` (same
    shape, boolean) restricts the projection to a face of the simplex:
    disallowed entries get exactly zero weight.  A row with nothing allowed
    falls back to the unrestricted projection.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("sparsemax input contains non-finite entries")
    vector = z.ndim == 1
    zm = z[None, :] if vector else z
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool).reshape(zm.shape)
        allowed = allowed | ~allowed.any(axis=1, keepdims=True)
        zm = np.where(allowed, zm, -np.inf)
    n = zm.shape[1]
    srt = -np.sort(-zm, axis=1)
    cumsum = np.cumsum(srt, axis=1)
    k = np.arange(1, n + 1, dtype=np.float64)
    support = 1.0 + k * srt > cumsum
    # support is a prefix of the sorted order, so its size is the count
    ksz = support.sum(axis=1)
    tau = (cumsum[np.arange(zm.shape[0]), ksz - 1] - 1.0) / ksz
    out = np.maximum(zm - tau[:, None], 0.0)
    return out[0] if vector else out


def sparsemax_forward(z, allowed=None):
    out = sparsemax(as_matrix(z), allowed)
    return out, LayerCache("sparsemax", out=out)


def sparsemax_backward(dout, cache: LayerCache):
    """Projection Jacobian: on the support, subtract the support mean; zero elsewhere."""
    out = cache.take("sparsemax")["out"]
    support = out > 0
    k = support.sum(axis=1, keepdims=True)
    mean = (dout * support).sum(axis=1, keepdims=True) / k
    return support * (dout - mean)


# ----------------------------------------------------------- cross entropy

def log_softmax_rows(x):
    x = as_matrix(x)
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of ``targets`` and its gradient w.r.t. logits."""
    logits = as_matrix(logits)
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    bad = np.flatnonzero((targets < 0) | (targets >= c))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"target {targets[i]} at row {i} outside [0, {c})")
    targets = targets.astype(np.int64)
    logp = log_softmax_rows(logits)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    grad /= n
    return float(loss), grad


# -------------------------------------------------------------------- adam

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if set(grads) != set(params):
        raise DimensionError(
            f"gradient names {sorted(set(grads) ^ set(params))} do not match parameters")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad {name} {g.shape} vs param {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
