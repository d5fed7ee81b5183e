"""Single-frame inference with batch norm folded into the preceding FC layers.

Trained float64 models are compiled into float32 weight sets; the forward
pass then needs one matmul plus bias per fused layer, and the min-max scaler
merges with the input batch norm.  The shape network
runs first because the slip features include the encoded shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .dataio import N_ACTUATORS, ScalerParams
from .slipnet import RESIDUAL_SCALE

F32 = np.float32


def _scaler_affine(scaler: ScalerParams, dtype):
    span = scaler.max - scaler.min
    inv = np.where(span > 0, 1.0 / np.where(span > 0, span, 1.0), 0.0)
    return inv.astype(dtype), (-scaler.min * inv).astype(dtype)


def _bn_affine(model, name):
    p, b, eps = model.params, model.buffers, model.config.bn_eps
    scale = p[f"{name}.gamma"] / np.sqrt(b[f"{name}.running_var"] + eps)
    shift = p[f"{name}.beta"] - b[f"{name}.running_mean"] * scale
    return scale, shift


def _sparsemax_row(z, allowed, k):
    """Sparsemax of one row; ``allowed`` excludes exhausted features (None = all)."""
    if allowed is not None and allowed.any():
        z = np.where(allowed, z, -np.inf)
    srt = np.sort(z)[::-1]
    cs = np.cumsum(srt)
    ksz = int(np.count_nonzero(1 + k * srt > cs))
    tau = (cs[ksz - 1] - 1) / ksz
    return np.maximum(z - tau, 0)


class CompiledSlipNet:
    def __init__(self, ckpt: Checkpoint, dtype=F32):
        m = ckpt.model
        cfg = m.config
        self.cfg = cfg
        self.dtype = dtype
        sc, sh = _scaler_affine(ckpt.scaler, np.float64)
        s0, t0 = _bn_affine(m, "bn0")
        # scaler and the input batch norm collapse into one affine map
        self.in_scale = (sc * s0).astype(dtype)
        self.in_shift = (sh * s0 + t0).astype(dtype)
        self.steps = []
        for t in range(cfg.n_steps + 1):
            blocks = []
            for blk in m.step_blocks(cfg, t):
                s, shift = _bn_affine(m, m.block_bn(t, blk))
                # v * sigmoid(g) == (v / 2) * (1 + tanh(g / 2)): halve every column
                w = 0.5 * m.params[f"{blk}.fc.W"] * s
                blocks.append((w.astype(dtype), (0.5 * shift).astype(dtype)))
            self.steps.append(blocks)
        self.att = [None]
        for t in range(1, cfg.n_steps + 1):
            s, shift = _bn_affine(m, f"att{t}.bn")
            self.att.append(((m.params[f"att{t}.fc.W"] * s).astype(dtype), shift.astype(dtype)))
        self.head_w = np.concatenate([m.params["head.slip.W"], m.params["head.crumple.W"]],
                                     axis=1).astype(dtype)
        self.head_b = np.concatenate([m.params["head.slip.b"], m.params["head.crumple.b"]]
                                     ).astype(dtype)
        self.gamma = dtype(cfg.gamma)
        self.res = dtype(RESIDUAL_SCALE)
        self.k = np.arange(1, cfg.feature_dim + 1, dtype=dtype)

    def _transformer(self, x, t):
        h = self.cfg.hidden
        for i, (w, b) in enumerate(self.steps[t]):
            z = x @ w
            z += b
            g = np.tanh(z[h:])
            g += 1
            y = z[:h] * g
            if i:
                y += x
                y *= self.res
            x = y
        return x

    def logits(self, features):
        """Raw (unscaled) feature row -> 4 logits: slip pair then crumple pair."""
        cfg = self.cfg
        xb = np.asarray(features, dtype=self.dtype) * self.in_scale + self.in_shift
        att = self._transformer(xb, 0)[cfg.n_d:]
        prior = None  # all ones before the first step
        agg = np.zeros(cfg.n_d, dtype=self.dtype)
        for t in range(1, cfg.n_steps + 1):
            w, b = self.att[t]
            z = att @ w + b
            allowed = None
            if prior is not None:
                z *= prior
                if self.gamma <= 1:
                    allowed = prior > 0
            mask = _sparsemax_row(z, allowed, self.k)
            h = self._transformer(mask * xb, t)
            agg += np.maximum(h[:cfg.n_d], 0)
            att = h[cfg.n_d:]
            prior = self.gamma - mask if prior is None else prior * (self.gamma - mask)
        return agg @ self.head_w + self.head_b


class CompiledShapeNet:
    def __init__(self, ckpt: Checkpoint, dtype=F32):
        m = ckpt.model
        self.in_scale, self.in_shift = _scaler_affine(ckpt.scaler, dtype)
        n = len(m.config.widths) - 1
        self.layers = [(m.params[f"fc{i}.W"].astype(dtype), m.params[f"fc{i}.b"].astype(dtype))
                       for i in range(n)]
        self.dtype = dtype

    def logits(self, features):
        x = np.asarray(features, dtype=self.dtype) * self.in_scale + self.in_shift
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            x = x @ w + b
            if i < last:
                x = np.maximum(x, 0)
        return x


def _softmax_max(z):
    e = np.exp(z - z.max())
    p = e / e.sum()
    i = int(p.argmax())
    return i, float(p[i])


def _binary(z0: float, z1: float) -> tuple[int, float]:
    # two-way softmax; ties go to class 0 like argmax
    d = z1 - z0
    if d > 0:
        return 1, 1.0 / (1.0 + math.exp(-d))
    return 0, 1.0 / (1.0 + math.exp(d))


@dataclass
class Detection:
    slip: int
    crumple: int
    shape: int
    slip_conf: float
    crumple_conf: float
    shape_conf: float


class InferenceEngine:
    """Both detectors, loaded read-only; safe to share across threads."""

    def __init__(self, slip: Checkpoint, shape: Checkpoint, dtype=F32):
        if slip.model.kind != "slipnet" or shape.model.kind != "shapenet":
            raise ValueError("engine needs a slipnet and a shapenet checkpoint")
        if slip.scaler is None or shape.scaler is None:
            raise ValueError("checkpoints must carry their fitted scalers")
        if slip.model.config.feature_dim != 2 * N_ACTUATORS + 2:
            raise ValueError("slip checkpoint does not take the 34-feature layout")
        self.slip = CompiledSlipNet(slip, dtype)
        self.shape = CompiledShapeNet(shape, dtype)
        self.shapes = slip.shapes
        self.dtype = dtype

    @classmethod
    def from_files(cls, slip_path, shape_path, dtype=F32) -> "InferenceEngine":
        return cls(load_checkpoint(slip_path), load_checkpoint(shape_path), dtype)

    def detect(self, torque, angle, mass) -> Detection:
        row = np.empty(2 * N_ACTUATORS + 2, dtype=self.dtype)
        row[:N_ACTUATORS] = torque
        row[N_ACTUATORS:2 * N_ACTUATORS] = angle
        row[2 * N_ACTUATORS] = mass
        shape, shape_conf = _softmax_max(self.shape.logits(row[:-1]))
        row[-1] = shape
        z = self.slip.logits(row).tolist()
        s, sc = _binary(z[0], z[1])
        c, cc = _binary(z[2], z[3])
        return Detection(s, c, shape, sc, cc, shape_conf)

    def detect_frame(self, frame) -> Detection:
        return self.detect(frame.torque, frame.angle, frame.mass)


def finite(*values) -> bool:
    return all(math.isfinite(v) for v in values)
