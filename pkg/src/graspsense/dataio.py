"""Telemetry dataset schema and the feature-engineering pipeline."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_ACTUATORS = 16
N_SHAPES = 13
SLIP_FEATURES = 2 * N_ACTUATORS + 2   # torques, angles, mass, encoded shape
SHAPE_FEATURES = 2 * N_ACTUATORS + 1  # torques, angles, mass

DEFAULT_SHAPES = (
    "sphere_s", "sphere_m", "sphere_l",
    "cube_s", "cube_m", "cube_l",
    "cuboid_s", "cuboid_m", "cuboid_l",
    "rugby_s", "rugby_m", "rugby_l",
    "cylinder_m",
)
# order matters: index = encoded size label
DEFAULT_SIZES = ("5x10x5", "R3.5", "5x5x5")

HEADER = (
    ["timestamp_us"]
    + [f"torque_{i}" for i in range(N_ACTUATORS)]
    + [f"angle_{i}" for i in range(N_ACTUATORS)]
    + ["mass_kg", "object_held", "size_code", "slip", "crumple"]
)


class DatasetError(ValueError):
    """Malformed dataset file; message carries the line number."""


@dataclass(frozen=True)
class TelemetryFrame:
    timestamp_us: int
    torque: tuple
    angle: tuple
    mass: float
    object_held: str
    size_code: str

    def __post_init__(self):
        if len(self.torque) != N_ACTUATORS or len(self.angle) != N_ACTUATORS:
            raise ValueError(
                f"expected {N_ACTUATORS} torques and angles, got "
                f"{len(self.torque)} and {len(self.angle)}")
        if not (self.mass > 0 and math.isfinite(self.mass)):
            raise ValueError(f"mass must be positive and finite, got {self.mass}")
        if not all(math.isfinite(v) for v in (*self.torque, *self.angle)):
            raise ValueError("torque/angle entries must be finite")


@dataclass(frozen=True)
class GraspLabel:
    slip: int
    crumple: int

    def __post_init__(self):
        if self.slip not in (0, 1) or self.crumple not in (0, 1):
            raise ValueError(f"label flags must be 0 or 1, got {self.slip}, {self.crumple}")

    @property
    def combo(self) -> int:
        """Index 0..3 of the (slip, crumple) combination."""
        return 2 * self.slip + self.crumple


class Vocab:
    """Ordered name list with a bijective name <-> index map."""

    def __init__(self, names: Sequence[str], size: int | None = None):
        names = list(names)
        if size is not None and len(names) != size:
            raise ValueError(f"vocabulary needs exactly {size} entries, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError("vocabulary entries must be unique")
        self.names = names
        self.index = {n: i for i, n in enumerate(names)}

    def __len__(self):
        return len(self.names)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.names == other.names

    def encode(self, values: Iterable[str]) -> np.ndarray:
        values = list(values)
        unknown = sorted({v for v in values if v not in self.index})
        if unknown:
            raise KeyError(f"unknown vocabulary value(s): {', '.join(unknown)}")
        return np.array([self.index[v] for v in values], dtype=np.int64)

    def decode(self, codes: Iterable[int]) -> list[str]:
        return [self.names[int(c)] for c in codes]

    @classmethod
    def read(cls, path, size: int | None = None) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()], size)

    def write(self, path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names), encoding="utf-8")


def shape_vocab(names: Sequence[str] = DEFAULT_SHAPES) -> Vocab:
    return Vocab(sorted(names), N_SHAPES)


def size_vocab(names: Sequence[str] = DEFAULT_SIZES) -> Vocab:
    return Vocab(names, 3)


@dataclass
class Dataset:
    frames: list
    labels: list

    def __len__(self):
        return len(self.frames)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.frames[i] for i in idx], [self.labels[i] for i in idx])


# ------------------------------------------------------------------- CSV

def _fmt(x: float) -> str:
    # repr is the shortest round-trip decimal
    return repr(float(x))


def frame_row(frame: TelemetryFrame, label: GraspLabel) -> list[str]:
    return ([str(frame.timestamp_us)]
            + [_fmt(v) for v in frame.torque]
            + [_fmt(v) for v in frame.angle]
            + [_fmt(frame.mass), frame.object_held, frame.size_code,
               str(label.slip), str(label.crumple)])


def dumps_dataset(frames, labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for f, lab in zip(frames, labels):
        w.writerow(frame_row(f, lab))
    return buf.getvalue()


def write_dataset(path, frames, labels) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dumps_dataset(frames, labels))


def _parse_row(row: list[str], lineno: int) -> tuple[TelemetryFrame, GraspLabel]:
    if len(row) != len(HEADER):
        raise DatasetError(
            f"line {lineno}: expected {len(HEADER)} columns, got {len(row)}")
    try:
        ts = int(row[0])
        if ts < 0:
            raise ValueError("negative timestamp")
        nums = [float(c) for c in row[1:2 * N_ACTUATORS + 2]]
        slip, crumple = int(row[-2]), int(row[-1])
    except ValueError as exc:
        raise DatasetError(f"line {lineno}: non-numeric cell ({exc})") from None
    try:
        frame = TelemetryFrame(
            timestamp_us=ts,
            torque=tuple(nums[:N_ACTUATORS]),
            angle=tuple(nums[N_ACTUATORS:2 * N_ACTUATORS]),
            mass=nums[-1],
            object_held=row[2 * N_ACTUATORS + 2],
            size_code=row[2 * N_ACTUATORS + 3],
        )
        label = GraspLabel(slip, crumple)
    except ValueError as exc:
        raise DatasetError(f"line {lineno}: {exc}") from None
    return frame, label


def load_dataset(path) -> Dataset:
    """Read a dataset CSV.  Header-only files give an empty dataset."""
    frames, labels = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError("line 1: missing header")
        if header != HEADER:
            missing = [c for c in HEADER if c not in header]
            detail = f"missing column(s) {', '.join(missing)}" if missing else \
                "columns out of order or unexpected extra columns"
            raise DatasetError(f"line 1: header does not match schema: {detail}")
        for lineno, row in enumerate(reader, start=2):
            f, lab = _parse_row(row, lineno)
            frames.append(f)
            labels.append(lab)
    return Dataset(frames, labels)


# -------------------------------------------------------------- features

def drop_timestamp(frames, task: str, shapes: Vocab | None = None) -> np.ndarray:
    """Numeric feature rows without the timestamp.

    ``slip``: torque, angle, mass, encoded shape (34 columns).
    ``shape``: torque, angle, mass (33 columns).
    """
    n = len(frames)
    width = SLIP_FEATURES if task == "slip" else SHAPE_FEATURES
    if task not in ("slip", "shape"):
        raise ValueError(f"unknown task {task!r}")
    out = np.empty((n, width))
    for i, f in enumerate(frames):
        out[i, :N_ACTUATORS] = f.torque
        out[i, N_ACTUATORS:2 * N_ACTUATORS] = f.angle
        out[i, 2 * N_ACTUATORS] = f.mass
    if task == "slip":
        shapes = shapes or shape_vocab()
        out[:, -1] = shapes.encode(f.object_held for f in frames)
    return out


def encode_labels(frames, shapes: Vocab, sizes: Vocab) -> tuple[np.ndarray, np.ndarray]:
    """Integer shape codes (0..12) and size codes (0..2)."""
    return (shapes.encode(f.object_held for f in frames),
            sizes.encode(f.size_code for f in frames))


def label_arrays(labels) -> tuple[np.ndarray, np.ndarray]:
    slip = np.fromiter((lab.slip for lab in labels), dtype=np.int64, count=len(labels))
    crumple = np.fromiter((lab.crumple for lab in labels), dtype=np.int64, count=len(labels))
    return slip, crumple


@dataclass
class ScalerParams:
    min: np.ndarray
    max: np.ndarray

    def write(self, path) -> None:
        lines = ["feature,min,max"]
        pairs = enumerate(zip(self.min, self.max))
        lines += [f"{i},{_fmt(lo)},{_fmt(hi)}" for i, (lo, hi) in pairs]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "ScalerParams":
        rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines()))[1:]
        return cls(np.array([float(r[1]) for r in rows]), np.array([float(r[2]) for r in rows]))


def fit_minmax(rows) -> ScalerParams:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError("fit_minmax needs at least one row")
    return ScalerParams(rows.min(axis=0), rows.max(axis=0))


def apply_minmax(rows, params: ScalerParams | None) -> np.ndarray:
    """Scale with training-split min/max.  Constant columns map to 0; no clipping."""
    if params is None:
        raise ValueError("scaler has not been fitted")
    rows = np.asarray(rows, dtype=np.float64)
    span = params.max - params.min
    safe = np.where(span > 0, span, 1.0)
    out = (rows - params.min) / safe
    return np.where(span > 0, out, 0.0)


# -------------------------------------------------------------- splitting

def shuffle_split(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays ``(train, validation)`` from a seeded permutation."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"validation fraction must lie in (0, 1), got {val_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    # round half up: round(1.6) = 2
    n_val = int(math.floor(val_fraction * n + 0.5))
    return perm[n_val:], perm[:n_val]


def kfold(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded partition of ``range(n)`` into ``k`` folds whose sizes differ by at most one."""
    if k < 2:
        raise ValueError("kfold needs k >= 2")
    if n < k:
        raise ValueError(f"cannot split {n} rows into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(perm[start:start + size])
        start += size
    return folds
