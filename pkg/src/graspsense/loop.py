"""Closed-loop teleoperation benchmark: plant + operator policy + detector.

Every episode holds one object with a mis-set grip command.  The naive
operator never corrects it; the feedback operator nudges the command up on a
slip report and down on a crumple report, once per control tick.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dataio import shape_vocab
from .protocol import WireRequest, WireResponse, parse_response
from .server import EdgeClient, LatencyReport
from .sim import Plant, SimConfig, derive_seed, make_object

POLICIES = ("naive", "feedback")


@dataclass
class LoopConfig:
    duration: float = 5.0     # s per episode
    tick: float = 0.01        # control period, s
    delta: float = 0.05       # correction step, fraction of tau_slip
    cmd_low: float = 0.4      # initial command range: [cmd_low * tau_slip,
    cmd_high: float = 1.5     #                         cmd_high * tau_crush]
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if not (self.duration > 0 and self.tick > 0 and self.delta > 0):
            raise ValueError("duration, tick and delta must be positive")
        if not 0 <= self.cmd_low < self.cmd_high:
            raise ValueError("need 0 <= cmd_low < cmd_high")


@dataclass
class EpisodeOutcome:
    shape: str
    initial_command: float
    dropped: bool
    drop_time: float | None
    ticks: int
    crumple_ticks: int


@dataclass
class LoopResult:
    policy: str
    episodes: list
    latency: LatencyReport | None = None

    @property
    def drops(self) -> int:
        return sum(e.dropped for e in self.episodes)

    @property
    def crumple_fraction(self) -> float:
        ticks = sum(e.ticks for e in self.episodes)
        return sum(e.crumple_ticks for e in self.episodes) / ticks if ticks else 0.0


# ----------------------------------------------------------- detectors

class OracleDetector:
    """Ground-truth labels; isolates the policy from model error."""

    latency = None

    def __call__(self, frame, label):
        return label.slip, label.crumple


class EngineDetector:
    def __init__(self, engine):
        self.engine = engine
        self.samples: list[float] = []

    def __call__(self, frame, label):
        t0 = time.perf_counter_ns()
        det = self.engine.detect_frame(frame)
        self.samples.append((time.perf_counter_ns() - t0) / 1000.0)
        return det.slip, det.crumple

    @property
    def latency(self):
        return LatencyReport(list(self.samples), sum(self.samples) / 1e6) if self.samples else None


class RemoteDetector:
    """Queries a running detector service; latency is client round-trip."""

    def __init__(self, host: str, port: int):
        self.client = EdgeClient(host, port)
        self.samples: list[float] = []

    def __call__(self, frame, label):
        raw = WireRequest(frame.timestamp_us, frame.torque, frame.angle, frame.mass).pack()
        t0 = time.perf_counter_ns()
        resp = parse_response(self.client.roundtrip(raw))
        self.samples.append((time.perf_counter_ns() - t0) / 1000.0)
        if not isinstance(resp, WireResponse):
            raise RuntimeError(f"detector rejected frame (reason {resp.reason})")
        return resp.slip, resp.crumple

    @property
    def latency(self):
        return LatencyReport(list(self.samples), sum(self.samples) / 1e6) if self.samples else None

    def close(self):
        self.client.close()


# ----------------------------------------------------------- benchmark

def _episode_setup(seed: int, index: int, cfg: LoopConfig):
    ep_seed = derive_seed(seed, index)
    rng = np.random.default_rng(ep_seed)
    names = shape_vocab().names
    shape = names[rng.integers(len(names))]
    jitter = cfg.sim.mass_jitter
    obj = make_object(shape, 1.0 + rng.uniform(-jitter, jitter), cfg.sim.band_scale)
    cmd0 = rng.uniform(cfg.cmd_low * obj.tau_slip, cfg.cmd_high * obj.tau_crush)
    return obj, cmd0, derive_seed(ep_seed, 0)


def run_episode(obj, cmd0: float, policy: str, detector, cfg: LoopConfig,
                plant_seed: int = 0) -> EpisodeOutcome:
    """Step the plant until the horizon or a drop, counting crumple ticks."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    plant = Plant(obj, cfg.sim, seed=plant_seed, torque=cmd0)
    step = cfg.delta * obj.tau_slip
    cmd = cmd0
    n = int(round(cfg.duration / cfg.tick))
    crumple = ticks = 0
    for _ in range(n):
        frame, label = plant.step(cmd, cfg.tick)
        ticks += 1
        crumple += label.crumple
        if plant.dropped:
            break
        if policy == "feedback":
            slip, crush = detector(frame, label)
            cmd = max(0.0, cmd + step * (slip - crush))
    drop_time = plant.elapsed if plant.dropped else None
    return EpisodeOutcome(obj.shape_name, cmd0, plant.dropped, drop_time, ticks, crumple)


def closed_loop_bench(n_episodes: int, policy: str, detector=None, seed: int = 0,
                      config: LoopConfig | None = None) -> LoopResult:
    """Both policies see the same objects and initial commands for a given seed."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    cfg = config or LoopConfig()
    if policy == "feedback" and detector is None:
        raise ValueError("feedback policy needs a detector")
    episodes = []
    for i in range(n_episodes):
        obj, cmd0, plant_seed = _episode_setup(seed, i, cfg)
        episodes.append(run_episode(obj, cmd0, policy, detector, cfg, plant_seed))
    latency = getattr(detector, "latency", None) if policy == "feedback" else None
    return LoopResult(policy, episodes, latency)
