"""Attentive tabular encoder with two binary heads (slip, crumple).

Each decision step builds a sparse feature mask from the previous step's
attention slice, feeds the masked features through a stack of gated
FC/BN/GLU blocks, and splits the result into a decision slice (summed,
after ReLU, into the final representation) and an attention slice for the
next step.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .dataio import SLIP_FEATURES, GraspLabel

RESIDUAL_SCALE = math.sqrt(0.5)
HEADS = ("slip", "crumple")


class NonFiniteActivation(FloatingPointError):
    pass


@dataclass
class SlipNetConfig:
    feature_dim: int = SLIP_FEATURES
    n_steps: int = 3
    n_d: int = 32
    n_a: int = 32
    n_shared: int = 2
    n_independent: int = 2
    gamma: float = 1.3
    bn_momentum: float = nx.BN_MOMENTUM
    bn_eps: float = nx.BN_EPS

    def __post_init__(self):
        if self.n_steps < 1 or self.n_d < 1 or self.n_a < 1 or self.feature_dim < 1:
            raise ValueError("n_steps, n_d, n_a and feature_dim must be at least 1")
        if self.gamma < 1:
            raise ValueError("gamma must be at least 1")
        if self.n_shared + self.n_independent < 1:
            raise ValueError("feature transformer needs at least one block")

    @property
    def hidden(self) -> int:
        return self.n_d + self.n_a


@dataclass
class StepTrace:
    mask: np.ndarray    # batch x feature_dim, rows on the simplex
    prior: np.ndarray   # prior scale used to build ``mask``
    decision: np.ndarray  # batch x n_d, before ReLU


@dataclass
class SlipOutput:
    slip: np.ndarray
    crumple: np.ndarray
    traces: list
    tape: dict | None = None


def _check(arr, where: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteActivation(f"non-finite activation at {where}")


class SlipNet:
    kind = "slipnet"

    def __init__(self, config: SlipNetConfig | None = None, params: dict | None = None,
                 buffers: dict | None = None, seed: int = 0):
        self.config = config or SlipNetConfig()
        if params is None:
            params, buffers = self.init_params(self.config, seed)
        self.params = params
        self.buffers = buffers if buffers is not None else self._fresh_buffers()
        self.validate()

    # ------------------------------------------------------------ layout

    @staticmethod
    def bn_names(cfg: SlipNetConfig) -> dict[str, int]:
        names = {"bn0": cfg.feature_dim}
        for t in range(cfg.n_steps + 1):
            for blk in SlipNet.step_blocks(cfg, t):
                names[SlipNet.block_bn(t, blk)] = 2 * cfg.hidden
        for t in range(1, cfg.n_steps + 1):
            names[f"att{t}.bn"] = cfg.feature_dim
        return names

    @staticmethod
    def block_names(cfg: SlipNetConfig) -> list[str]:
        names = [f"shared{j}" for j in range(cfg.n_shared)]
        for t in range(cfg.n_steps + 1):
            names += [f"step{t}.block{j}" for j in range(cfg.n_independent)]
        return names

    @staticmethod
    def step_blocks(cfg: SlipNetConfig, t: int) -> list[str]:
        return ([f"shared{j}" for j in range(cfg.n_shared)]
                + [f"step{t}.block{j}" for j in range(cfg.n_independent)])

    @staticmethod
    def block_bn(t: int, blk: str) -> str:
        # shared blocks share FC weights only; every step owns its batchnorm
        return f"step{t}.{blk}.bn" if blk.startswith("shared") else f"{blk}.bn"

    @staticmethod
    def param_shapes(cfg: SlipNetConfig) -> dict[str, tuple]:
        shapes = {"bn0.gamma": (cfg.feature_dim,), "bn0.beta": (cfg.feature_dim,)}
        h2 = 2 * cfg.hidden
        for blk in SlipNet.block_names(cfg):
            # the first block of every step sees the raw feature width
            first = blk == "shared0" or (cfg.n_shared == 0 and blk.endswith(".block0"))
            fan_in = cfg.feature_dim if first else cfg.hidden
            shapes[f"{blk}.fc.W"] = (fan_in, h2)
        for name, dim in SlipNet.bn_names(cfg).items():
            if name != "bn0" and not name.startswith("att"):
                shapes[f"{name}.gamma"] = (dim,)
                shapes[f"{name}.beta"] = (dim,)
        for t in range(1, cfg.n_steps + 1):
            shapes[f"att{t}.fc.W"] = (cfg.n_a, cfg.feature_dim)
            shapes[f"att{t}.bn.gamma"] = (cfg.feature_dim,)
            shapes[f"att{t}.bn.beta"] = (cfg.feature_dim,)
        for head in HEADS:
            shapes[f"head.{head}.W"] = (cfg.n_d, 2)
            shapes[f"head.{head}.b"] = (2,)
        return shapes

    @classmethod
    def init_params(cls, cfg: SlipNetConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cls.param_shapes(cfg).items():
            if name.endswith(".W"):
                params[name] = nx.glorot_uniform(rng, *shape)
            elif name.endswith(".gamma"):
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
        return params, None

    def _fresh_buffers(self) -> dict:
        out = {}
        for name, dim in self.bn_names(self.config).items():
            out[f"{name}.running_mean"] = np.zeros(dim)
            out[f"{name}.running_var"] = np.ones(dim)
        return out

    def validate(self) -> None:
        expected = self.param_shapes(self.config)
        if set(expected) != set(self.params):
            diff = sorted(set(expected) ^ set(self.params))
            raise ValueError(f"parameter set does not match config: {diff[:6]}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"{name} holds non-finite values")
        for name, dim in self.bn_names(self.config).items():
            for suffix in ("running_mean", "running_var"):
                buf = self.buffers.get(f"{name}.{suffix}")
                if buf is None or buf.shape != (dim,):
                    raise ValueError(f"missing or malformed buffer {name}.{suffix}")

    def copy(self) -> "SlipNet":
        return SlipNet(copy.deepcopy(self.config), {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.buffers.items()})

    # ----------------------------------------------------------- forward

    def _bn(self, name, x, mode, tape, key=None):
        p, b = self.params, self.buffers
        stats = nx.RunningStats(b[f"{name}.running_mean"], b[f"{name}.running_var"],
                                self.config.bn_momentum)
        out, cache = nx.batchnorm_forward(x, p[f"{name}.gamma"], p[f"{name}.beta"], stats,
                                          mode, self.config.bn_eps)
        if mode == "train":
            b[f"{name}.running_mean"], b[f"{name}.running_var"] = stats.mean, stats.var
        tape[key or name] = cache
        return out

    def _transformer(self, x, t, mode, tape):
        for i, blk in enumerate(self.step_blocks(self.config, t)):
            key = f"t{t}.{blk}"
            z, tape[f"{key}.fc"] = nx.fc_forward(x, self.params[f"{blk}.fc.W"])
            z = self._bn(self.block_bn(t, blk), z, mode, tape, key=f"{key}.bn")
            y, tape[f"{key}.glu"] = nx.glu_forward(z)
            x = y if i == 0 else (x + y) * RESIDUAL_SCALE
            _check(x, f"step {t} block {blk}")
        return x

    def forward(self, x, mode: str = "infer") -> SlipOutput:
        cfg = self.config
        x = nx.as_matrix(x)
        if x.shape[1] != cfg.feature_dim:
            raise nx.DimensionError(f"expected {cfg.feature_dim} features, got {x.shape[1]}")
        tape: dict = {}
        xb = self._bn("bn0", x, mode, tape)
        h = self._transformer(xb, 0, mode, tape)
        att = h[:, cfg.n_d:]
        prior = np.ones_like(xb)
        agg = np.zeros((x.shape[0], cfg.n_d))
        traces = []
        for t in range(1, cfg.n_steps + 1):
            z, tape[f"att{t}.fc"] = nx.fc_forward(att, self.params[f"att{t}.fc.W"])
            z = self._bn(f"att{t}.bn", z, mode, tape)
            tape[f"att{t}.z"] = z
            # a feature whose budget is spent is excluded from the projection
            mask, tape[f"att{t}.sm"] = nx.sparsemax_forward(z * prior, prior > 0)
            _check(mask, f"step {t} attentive transformer")
            h = self._transformer(mask * xb, t, mode, tape)
            d, att = h[:, :cfg.n_d], h[:, cfg.n_d:]
            r, tape[f"relu{t}"] = nx.relu_forward(d)
            agg = agg + r
            traces.append(StepTrace(mask, prior, d))
            prior = prior * (cfg.gamma - mask)
        tape["xb"] = xb
        tape["agg"] = agg
        tape["traces"] = traces
        logits = {}
        for head in HEADS:
            logits[head], tape[f"head.{head}"] = nx.fc_forward(
                agg, self.params[f"head.{head}.W"], self.params[f"head.{head}.b"])
        return SlipOutput(logits["slip"], logits["crumple"], traces, tape)

    # ---------------------------------------------------------- backward

    def _bn_back(self, dout, cache, name, grads):
        dx, dg, db = nx.batchnorm_backward(dout, cache)
        grads[f"{name}.gamma"] += dg
        grads[f"{name}.beta"] += db
        return dx

    def _transformer_back(self, dh, t, tape, grads):
        blocks = self.step_blocks(self.config, t)
        for i in range(len(blocks) - 1, -1, -1):
            blk = blocks[i]
            key = f"t{t}.{blk}"
            if i == 0:
                dy, dres = dh, None
            else:
                dy = dh * RESIDUAL_SCALE
                dres = dy
            dz = nx.glu_backward(dy, tape[f"{key}.glu"])
            dz = self._bn_back(dz, tape[f"{key}.bn"], self.block_bn(t, blk), grads)
            dx, dw, _ = nx.fc_backward(dz, tape[f"{key}.fc"])
            grads[f"{blk}.fc.W"] += dw
            dh = dx if dres is None else dx + dres
        return dh

    def backward(self, out: SlipOutput, dslip, dcrumple) -> dict:
        """Gradients of a scalar loss given its gradients w.r.t. both logit heads."""
        cfg = self.config
        tape = out.tape
        if tape is None:
            raise ValueError("forward output carries no tape")
        out.tape = None
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dagg = 0.0
        for head, dlog in zip(HEADS, (dslip, dcrumple)):
            da, dw, db = nx.fc_backward(dlog, tape[f"head.{head}"])
            grads[f"head.{head}.W"] += dw
            grads[f"head.{head}.b"] += db
            dagg = dagg + da
        xb = tape["xb"]
        traces = tape["traces"]
        dxb = np.zeros_like(xb)
        datt = np.zeros((xb.shape[0], cfg.n_a))
        dprior_next = np.zeros_like(xb)
        for t in range(cfg.n_steps, 0, -1):
            tr = traces[t - 1]
            dd = nx.relu_backward(dagg, tape[f"relu{t}"])
            dh = np.concatenate([dd, datt], axis=1)
            dmasked = self._transformer_back(dh, t, tape, grads)
            dmask = dmasked * xb - dprior_next * tr.prior
            dxb += dmasked * tr.mask
            dzp = nx.sparsemax_backward(dmask, tape[f"att{t}.sm"])
            z = tape[f"att{t}.z"]
            dprior_next = dzp * z + dprior_next * (cfg.gamma - tr.mask)
            dz = self._bn_back(dzp * tr.prior, tape[f"att{t}.bn"], f"att{t}.bn", grads)
            datt, dw, _ = nx.fc_backward(dz, tape[f"att{t}.fc"])
            grads[f"att{t}.fc.W"] += dw
        dh0 = np.concatenate([np.zeros((xb.shape[0], cfg.n_d)), datt], axis=1)
        dxb += self._transformer_back(dh0, 0, tape, grads)
        self._bn_back(dxb, tape["bn0"], "bn0", grads)
        return grads

    def loss_and_grads(self, x, slip, crumple, mode: str = "train"):
        """Summed cross-entropy of both heads and its parameter gradients."""
        out = self.forward(x, mode)
        ls, gs = nx.cross_entropy(out.slip, slip)
        lc, gc = nx.cross_entropy(out.crumple, crumple)
        grads = self.backward(out, gs, gc)
        return ls + lc, grads, out

    # ---------------------------------------------------------- inference

    def predict(self, x):
        out = self.forward(x, "infer")
        return predict_from_logits(out.slip, out.crumple)

    def config_dict(self) -> dict:
        return asdict(self.config)


def predict_from_logits(slip_logits, crumple_logits):
    """Argmax per head (ties go to the lower class) plus softmax confidences."""
    ps = nx.softmax_rows(slip_logits)
    pc = nx.softmax_rows(crumple_logits)
    s = ps.argmax(axis=1)
    c = pc.argmax(axis=1)
    labels = [GraspLabel(int(a), int(b)) for a, b in zip(s, c)]
    return labels, ps.max(axis=1), pc.max(axis=1)


def explain(traces) -> np.ndarray:
    """Global feature attribution: masks weighted by each step's decision magnitude."""
    if not traces:
        raise ValueError("explain needs at least one step trace")
    total = np.zeros(traces[0].mask.shape[1])
    for tr in traces:
        eta = nx.relu(tr.decision).sum(axis=1)
        total += eta @ tr.mask
    s = total.sum()
    if s <= 0:
        # every decision slice is inactive: fall back to unweighted masks
        total = sum(tr.mask.sum(axis=0) for tr in traces)
        s = total.sum()
    return total / s
