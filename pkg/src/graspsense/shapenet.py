"""Five fully connected layers mapping 33 scaled features to 13 shape classes."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .dataio import N_SHAPES, SHAPE_FEATURES


@dataclass
class ShapeNetConfig:
    widths: tuple = (SHAPE_FEATURES, 64, 128, 64, 32, N_SHAPES)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 6:
            raise ValueError("shape network has exactly 5 fully connected layers")
        if min(self.widths) < 1:
            raise ValueError("layer widths must be positive")


@dataclass
class ShapeOutput:
    logits: np.ndarray
    tape: list | None = None


class ShapeNet:
    kind = "shapenet"

    def __init__(self, config: ShapeNetConfig | None = None, params: dict | None = None,
                 buffers: dict | None = None, seed: int = 0):
        self.config = config or ShapeNetConfig()
        self.params = params if params is not None else self.init_params(self.config, seed)
        self.buffers = buffers or {}
        self.validate()

    @staticmethod
    def param_shapes(cfg: ShapeNetConfig) -> dict[str, tuple]:
        shapes = {}
        for i, (a, b) in enumerate(zip(cfg.widths[:-1], cfg.widths[1:])):
            shapes[f"fc{i}.W"] = (a, b)
            shapes[f"fc{i}.b"] = (b,)
        return shapes

    @classmethod
    def init_params(cls, cfg: ShapeNetConfig, seed: int = 0) -> dict:
        rng = np.random.default_rng(seed)
        return {name: nx.glorot_uniform(rng, *shape) if name.endswith(".W") else np.zeros(shape)
                for name, shape in cls.param_shapes(cfg).items()}

    def validate(self) -> None:
        expected = self.param_shapes(self.config)
        if set(expected) != set(self.params):
            raise ValueError("parameter set does not match config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"{name} holds non-finite values")

    def copy(self) -> "ShapeNet":
        return ShapeNet(copy.deepcopy(self.config), {k: v.copy() for k, v in self.params.items()})

    def forward(self, x, mode: str = "infer") -> ShapeOutput:
        x = nx.as_matrix(x)
        if x.shape[1] != self.config.widths[0]:
            raise nx.DimensionError(
                f"expected {self.config.widths[0]} features, got {x.shape[1]}")
        tape = []
        n_layers = len(self.config.widths) - 1
        for i in range(n_layers):
            x, c = nx.fc_forward(x, self.params[f"fc{i}.W"], self.params[f"fc{i}.b"])
            tape.append(c)
            if i < n_layers - 1:
                x, c = nx.relu_forward(x)
                tape.append(c)
        return ShapeOutput(x, tape)

    def backward(self, out: ShapeOutput, dlogits) -> dict:
        tape, out.tape = out.tape, None
        grads = {}
        d = dlogits
        for i in range(len(self.config.widths) - 2, -1, -1):
            d, grads[f"fc{i}.W"], grads[f"fc{i}.b"] = nx.fc_backward(d, tape.pop())
            if i > 0:
                d = nx.relu_backward(d, tape.pop())
        return grads

    def loss_and_grads(self, x, targets, mode: str = "train"):
        out = self.forward(x, mode)
        loss, g = nx.cross_entropy(out.logits, targets)
        return loss, self.backward(out, g), out

    def predict(self, x):
        """Class index (ties go to the lower index) and softmax confidence."""
        p = nx.softmax_rows(self.forward(x).logits)
        return p.argmax(axis=1), p.max(axis=1)

    def config_dict(self) -> dict:
        return asdict(self.config)
