"""Synthetic grasp telemetry: a threshold-kinematic hand model.

Joint angles wander around a per-shape pose signature (Ornstein-Uhlenbeck
walk).  Joint torques are the lagged grip torque spread over each finger,
plus sensor noise.  Per-frame labels come from the mean fingertip torque
against the object's slip and crush thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dataio import (DEFAULT_SIZES, N_ACTUATORS, Dataset, GraspLabel,
                     TelemetryFrame, shape_vocab)

FINGERTIP_JOINTS = (3, 7, 11, 15)
# torque share of each joint along a finger, base to tip
FINGER_PROFILE = (0.45, 0.7, 0.85, 1.0)
JOINT_WEIGHTS = np.tile(FINGER_PROFILE, 4)

SIGNATURE_SEED = 20221
MIN_SIGNATURE_GAP = 0.3

_FAMILY = {
    # family: (base mass kg, grip torque per kg, crush/slip ratio, size code)
    "sphere": (0.15, 1.2, 1.8, "R3.5"),
    "cube": (0.20, 0.8, 2.2, "5x5x5"),
    "cuboid": (0.30, 0.9, 2.0, "5x10x5"),
    "rugby": (0.12, 1.4, 1.7, "R3.5"),
    "cylinder": (0.25, 1.0, 2.0, "R3.5"),
}
_SIZE_SCALE = {"s": 0.6, "m": 1.0, "l": 1.5}
SLIP_OFFSET = 0.05  # N·m needed even for a massless object


class PlantDropped(RuntimeError):
    """Raised when stepping a plant whose object has already been dropped."""


@dataclass
class SimConfig:
    rate: float = 100.0          # Hz
    duration: float = 10.0       # s per episode
    lag: float = 0.05            # torque time constant, s
    t_drop: float = 0.5          # s of continuous slip before the object falls
    angle_sigma: float = 0.02    # stationary std of the joint-angle walk, rad
    angle_tau: float = 0.2       # correlation time of the joint-angle walk, s
    torque_noise: float = 0.004  # sensor noise std, N·m
    mass_jitter: float = 0.1     # relative, uniform +/- per episode
    band_scale: float = 1.0      # scales the slip-crush band width
    label_noise: float = 0.0     # per-frame probability of a corrupted label
    slip_drift: float = 0.0      # threshold drift, N·m/s (both thresholds)

    def __post_init__(self):
        for name in ("rate", "duration", "lag", "t_drop", "angle_tau", "band_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("angle_sigma", "torque_noise", "mass_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")
        if self.mass_jitter >= 1.0:
            raise ValueError("mass_jitter must be below 1")

    @classmethod
    def from_mapping(cls, values: dict) -> "SimConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown simulator setting(s): {', '.join(sorted(unknown))}")
        return cls(**{k: float(v) for k, v in values.items()})


def read_keyvalue(path) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    return splitmix64((master * 0x100000001B3 + index) & 0xFFFFFFFFFFFFFFFF)


# ------------------------------------------------------------- objects

def pose_signatures(n: int = 13, seed: int = SIGNATURE_SEED) -> np.ndarray:
    """Canonical joint angles per shape class, pairwise at least 0.3 rad apart."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.3, 1.1, N_ACTUATORS)
    sigs: list[np.ndarray] = []
    while len(sigs) < n:
        cand = base + rng.uniform(-0.25, 0.25, N_ACTUATORS)
        if all(np.linalg.norm(cand - s) >= MIN_SIGNATURE_GAP for s in sigs):
            sigs.append(cand)
    return np.array(sigs)


_SIGNATURES = pose_signatures()


@dataclass(frozen=True)
class ObjectSpec:
    shape_class: int
    size_code: int
    mass: float
    tau_slip: float
    tau_crush: float
    pose_signature: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.tau_slip < self.tau_crush:
            raise ValueError("thresholds must satisfy 0 < tau_slip < tau_crush")
        if self.mass <= 0:
            raise ValueError("mass must be positive")

    @property
    def shape_name(self) -> str:
        return shape_vocab().names[self.shape_class]

    @property
    def size_name(self) -> str:
        return DEFAULT_SIZES[self.size_code]


def make_object(shape: str, mass_scale: float = 1.0, band_scale: float = 1.0) -> ObjectSpec:
    """Object for one of the default shape names, thresholds derived from mass."""
    vocab = shape_vocab()
    family, size = shape.rsplit("_", 1)
    base_mass, grip_per_kg, ratio, size_name = _FAMILY[family]
    mass = base_mass * _SIZE_SCALE[size] * mass_scale
    tau_slip = SLIP_OFFSET + grip_per_kg * mass
    tau_crush = tau_slip * (1.0 + (ratio - 1.0) * band_scale)
    cls = vocab.index[shape]
    return ObjectSpec(cls, DEFAULT_SIZES.index(size_name), mass, tau_slip, tau_crush,
                      _SIGNATURES[cls])


def label_rule(fingertip_mean: float, tau_slip: float, tau_crush: float) -> GraspLabel:
    return GraspLabel(int(fingertip_mean < tau_slip), int(fingertip_mean > tau_crush))


def frame_label(frame: TelemetryFrame, tau_slip: float, tau_crush: float) -> GraspLabel:
    tips = [frame.torque[j] for j in FINGERTIP_JOINTS]
    return label_rule(sum(tips) / len(tips), tau_slip, tau_crush)


# --------------------------------------------------------------- plant

class Plant:
    """Robotic-hand side of the teleoperation loop.

    Actual grip torque follows the command with a first-order lag.  An
    object slipping for longer than ``t_drop`` is dropped; the plant then
    refuses further steps.
    """

    def __init__(self, obj: ObjectSpec, config: SimConfig | None = None, seed: int = 0,
                 torque: float = 0.0, t0_us: int = 0, can_drop: bool = True):
        self.obj = obj
        self.can_drop = can_drop
        self.config = config or SimConfig()
        self.rng = np.random.default_rng(seed)
        self.torque = float(torque)
        self.t_us = int(t0_us)
        self.elapsed = 0.0
        self.ou = self.rng.normal(0.0, self.config.angle_sigma, N_ACTUATORS)
        self.slip_us = 0
        self.dropped = False

    def thresholds(self) -> tuple[float, float]:
        drift = self.config.slip_drift * self.elapsed
        return self.obj.tau_slip + drift, self.obj.tau_crush + drift

    def step(self, command: float, dt: float | None = None) -> tuple[TelemetryFrame, GraspLabel]:
        if self.dropped:
            raise PlantDropped("object already dropped; plant is in its terminal state")
        cfg = self.config
        dt = 1.0 / cfg.rate if dt is None else dt
        if not dt > 0:
            raise ValueError("dt must be positive")
        dt_us = int(round(dt * 1e6))
        self.torque = command + (self.torque - command) * math.exp(-dt / cfg.lag)
        decay = math.exp(-dt / cfg.angle_tau)
        self.ou = self.ou * decay + cfg.angle_sigma * math.sqrt(1.0 - decay * decay) \
            * self.rng.normal(size=N_ACTUATORS)
        self.t_us += dt_us
        self.elapsed += dt

        torques = self.torque * JOINT_WEIGHTS + self.rng.normal(0.0, cfg.torque_noise, N_ACTUATORS)
        angles = self.obj.pose_signature + self.ou
        frame = TelemetryFrame(self.t_us, tuple(torques.tolist()), tuple(angles.tolist()),
                               self.obj.mass, self.obj.shape_name, self.obj.size_name)
        label = frame_label(frame, *self.thresholds())
        if label.slip:
            self.slip_us += dt_us
            if self.can_drop and self.slip_us > int(round(cfg.t_drop * 1e6)):
                self.dropped = True
        else:
            self.slip_us = 0
        return frame, label


def plant_step(plant: Plant, command: float, dt: float | None = None):
    return plant.step(command, dt)


# ------------------------------------------------------- operator input

@dataclass(frozen=True)
class OperatorProfile:
    """Commanded grip torque over time.

    ``constant``: ``target`` throughout.
    ``ramp``: linear from ``start`` to ``target`` over ``period`` seconds, then held.
    ``overshoot``: starts at ``start`` (above target) and decays to ``target``.
    ``undershoot``: starts at ``start`` (below target) and recovers to ``target``.
    """

    kind: str
    target: float
    start: float = 0.0
    period: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "ramp", "overshoot", "undershoot"):
            raise ValueError(f"unknown operator profile {self.kind!r}")
        if self.target < 0 or self.start < 0:
            raise ValueError("commanded torques must be non-negative")
        if not self.period > 0:
            raise ValueError("profile period must be positive")
        if self.kind == "overshoot" and self.start < self.target:
            raise ValueError("overshoot must start above its target")
        if self.kind == "undershoot" and self.start > self.target:
            raise ValueError("undershoot must start below its target")

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return self.target
        if self.kind == "ramp":
            return self.start + (self.target - self.start) * min(t / self.period, 1.0)
        return self.target + (self.start - self.target) * math.exp(-t / self.period)


@dataclass
class Episode:
    object: ObjectSpec
    frames: list
    labels: list
    seed: int


def generate_episode(obj: ObjectSpec, profile: OperatorProfile, duration: float | None = None,
                     rate: float | None = None, seed: int = 0,
                     config: SimConfig | None = None, t0_us: int = 0) -> Episode:
    """Run the plant open-loop under ``profile``; the object never drops here."""
    cfg = config or SimConfig()
    duration = cfg.duration if duration is None else duration
    rate = cfg.rate if rate is None else rate
    if not (duration > 0 and rate > 0):
        raise ValueError("duration and rate must be positive")
    cfg = replace(cfg, rate=rate, duration=duration)
    # dataset episodes record the full trajectory, so no drop
    plant = Plant(obj, cfg, seed=seed, torque=profile(0.0), t0_us=t0_us, can_drop=False)
    dt = 1.0 / rate
    n = int(round(duration * rate))
    frames, labels = [], []
    for k in range(n):
        f, lab = plant.step(profile(k * dt), dt)
        frames.append(f)
        labels.append(lab)
    if cfg.label_noise > 0:
        noise = np.random.default_rng(derive_seed(seed, 1))
        legal = (GraspLabel(0, 0), GraspLabel(1, 0), GraspLabel(0, 1))
        for i, lab in enumerate(labels):
            if noise.random() < cfg.label_noise:
                others = [c for c in legal if c != lab]
                labels[i] = others[noise.integers(len(others))]
    return Episode(obj, frames, labels, seed)


def random_profile(obj: ObjectSpec, rng: np.random.Generator) -> OperatorProfile:
    """A plausible operator: sometimes too loose, sometimes too tight."""
    lo, hi = obj.tau_slip, obj.tau_crush
    kind = ("constant", "ramp", "overshoot", "undershoot")[rng.integers(4)]
    if kind == "constant":
        return OperatorProfile("constant", rng.uniform(0.3 * lo, 1.4 * hi))
    if kind == "ramp":
        a, b = rng.uniform(0.2 * lo, 0.9 * lo), rng.uniform(1.05 * hi, 1.5 * hi)
        if rng.random() < 0.5:
            a, b = b, a
        return OperatorProfile("ramp", b, start=a, period=rng.uniform(2.0, 9.0))
    if kind == "overshoot":
        target = rng.uniform(0.5 * lo, 1.2 * hi)
        start = max(target, rng.uniform(1.05 * hi, 1.8 * hi))
        return OperatorProfile("overshoot", target, start=start, period=rng.uniform(0.5, 4.0))
    target = rng.uniform(0.8 * lo, 1.3 * hi)
    start = min(target, rng.uniform(0.1 * lo, 0.9 * lo))
    return OperatorProfile("undershoot", target, start=start, period=rng.uniform(0.5, 4.0))


def parse_mix(text: str) -> dict[str, float]:
    """``"sphere_m:0.5,cube_s:0.5"`` -> weights."""
    mix = {}
    for part in text.split(","):
        name, _, w = part.partition(":")
        mix[name.strip()] = float(w) if w else 1.0
    return mix


def allocate(n: int, mix: dict[str, float]) -> list[str]:
    """Largest-remainder allocation of ``n`` episodes to shapes, in vocab order."""
    vocab = shape_vocab()
    unknown = [k for k in mix if k not in vocab.index]
    if unknown:
        raise ValueError(f"unknown shape(s) in mix: {', '.join(unknown)}")
    if any(w < 0 for w in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ValueError("mix weights must be non-negative and sum to 1")
    names = [s for s in vocab.names if mix.get(s, 0.0) > 0]
    quotas = [n * mix[s] for s in names]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(names)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return [s for s, c in zip(names, counts) for _ in range(c)]


def uniform_mix() -> dict[str, float]:
    names = shape_vocab().names
    return {s: 1.0 / len(names) for s in names}


def generate_dataset(n_episodes: int, mix: dict[str, float] | None = None, seed: int = 0,
                     config: SimConfig | None = None) -> Dataset:
    """Labeled telemetry from ``n_episodes`` seeded episodes, deterministic under ``seed``."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    cfg = config or SimConfig()
    shapes = allocate(n_episodes, mix or uniform_mix())
    order = np.random.default_rng(seed).permutation(n_episodes)
    span_us = int(round((cfg.duration + 1.0) * 1e6))
    frames, labels = [], []
    for i, idx in enumerate(order):
        ep_seed = derive_seed(seed, i)
        rng = np.random.default_rng(ep_seed)
        scale = 1.0 + rng.uniform(-cfg.mass_jitter, cfg.mass_jitter)
        obj = make_object(shapes[idx], scale, cfg.band_scale)
        profile = random_profile(obj, rng)
        ep = generate_episode(obj, profile, seed=derive_seed(ep_seed, 0), config=cfg,
                              t0_us=i * span_us)
        frames.extend(ep.frames)
        labels.extend(ep.labels)
    return Dataset(frames, labels)
