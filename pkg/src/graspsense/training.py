"""Training loops, metrics and cross-validation for both detectors."""

from __future__ import annotations

import csv
import ctypes
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .dataio import (Dataset, ScalerParams, Vocab, apply_minmax, drop_timestamp,
                     fit_minmax, kfold, label_arrays, shape_vocab, shuffle_split)
from .shapenet import ShapeNet, ShapeNetConfig
from .sim import derive_seed
from .slipnet import SlipNet, SlipNetConfig

log = logging.getLogger(__name__)

TASK_DEFAULTS = {
    "slip": {"lr": 0.02, "epochs": 100},
    "shape": {"lr": 0.002, "epochs": 200},
}
EVAL_CHUNK = 8192


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    task: str = "slip"
    lr: float | None = None
    epochs: int | None = None
    batch_size: int = 2048
    val_fraction: float = 0.16
    k_folds: int = 10
    seed: int = 0
    patience: int = 0  # 0 disables early stopping

    def __post_init__(self):
        if self.task not in TASK_DEFAULTS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.lr is None:
            self.lr = TASK_DEFAULTS[self.task]["lr"]
        if self.epochs is None:
            self.epochs = TASK_DEFAULTS[self.task]["epochs"]
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 2:
            raise ValueError("lr must be >= 0, epochs >= 1 and batch_size >= 2")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")


@dataclass
class EvalResult:
    loss: float
    acc: float
    slip_acc: float | None = None
    crumple_acc: float | None = None
    confusion: np.ndarray | None = None  # rows: true class/combination, cols: predicted
    n: int = 0


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    acc: float
    slip_acc: float | None = None
    crumple_acc: float | None = None
    fold: int | None = None


@dataclass
class FitResult:
    model: object
    history: list
    best_epoch: int
    best: EvalResult | None


def _tune_allocator() -> None:
    # glibc hands large temporaries back to the OS after every op; keep them pooled
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 64 << 20)   # M_MMAP_THRESHOLD
        libc.mallopt(-1, 256 << 20)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


# ------------------------------------------------------------ features

def slip_arrays(dataset: Dataset, shapes: Vocab | None = None):
    x = drop_timestamp(dataset.frames, "slip", shapes or shape_vocab())
    return x, np.stack(label_arrays(dataset.labels), axis=1)


def shape_arrays(dataset: Dataset, shapes: Vocab | None = None):
    x = drop_timestamp(dataset.frames, "shape")
    return x, (shapes or shape_vocab()).encode(f.object_held for f in dataset.frames)


# ----------------------------------------------------------- evaluation

def _logits(model, x):
    outs = []
    for i in range(0, x.shape[0], EVAL_CHUNK):
        o = model.forward(x[i:i + EVAL_CHUNK], "infer")
        outs.append((o.slip, o.crumple) if model.kind == "slipnet" else (o.logits,))
    return [np.concatenate(parts) for parts in zip(*outs)]


def metrics_from_logits(logits: list, y) -> EvalResult:
    """Loss/accuracy from precomputed logits: ``[slip, crumple]`` or ``[shape]``."""
    y = np.asarray(y)
    n = y.shape[0]
    if len(logits) == 2:
        ls, _ = nx.cross_entropy(logits[0], y[:, 0])
        lc, _ = nx.cross_entropy(logits[1], y[:, 1])
        ps = logits[0].argmax(axis=1)
        pc = logits[1].argmax(axis=1)
        ok_s = ps == y[:, 0]
        ok_c = pc == y[:, 1]
        conf = np.zeros((4, 4), dtype=np.int64)
        np.add.at(conf, (2 * y[:, 0] + y[:, 1], 2 * ps + pc), 1)
        return EvalResult(ls + lc, float(np.mean(ok_s & ok_c)), float(ok_s.mean()),
                          float(ok_c.mean()), conf, n)
    loss, _ = nx.cross_entropy(logits[0], y)
    pred = logits[0].argmax(axis=1)
    k = logits[0].shape[1]
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    return EvalResult(loss, float(np.mean(pred == y)), confusion=conf, n=n)


def evaluate(model, x, y) -> EvalResult:
    """Infer-mode metrics; ``x`` is already scaled.  Slip accuracy is joint (both heads right)."""
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return metrics_from_logits(_logits(model, np.asarray(x, dtype=np.float64)), y)


# ------------------------------------------------------------ training

def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded minibatches covering every row.  A trailing single row joins the previous
    batch, since train-mode batch norm needs two rows."""
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def _step_loss(model, xb, yb):
    if model.kind == "slipnet":
        loss, grads, out = model.loss_and_grads(xb, yb[:, 0], yb[:, 1], "train")
        return loss, grads, [out.slip, out.crumple]
    loss, grads, out = model.loss_and_grads(xb, yb, "train")
    return loss, grads, [out.logits]


def _score(r: EvalResult) -> float:
    return r.acc


def fit(model, x_train, y_train, x_val, y_val, cfg: TrainConfig, fold: int | None = None,
        on_epoch: Callable | None = None) -> FitResult:
    """Adam on summed cross-entropy.  Returns the model from the best validation epoch."""
    _tune_allocator()
    n = x_train.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if n < 2 and model.kind == "slipnet":
        raise ValueError("slip training needs at least two rows")
    state = nx.AdamState()
    history = []
    best, best_epoch, best_model = None, 0, model.copy()
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(derive_seed(cfg.seed, epoch))
        total, seen = 0.0, 0
        tally = None
        for b, idx in enumerate(batches(n, cfg.batch_size, rng), start=1):
            xb, yb = x_train[idx], y_train[idx]
            loss, grads, logits = _step_loss(model, xb, yb)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            nx.adam_step(model.params, grads, state, cfg.lr)
            total += loss * len(idx)
            seen += len(idx)
            tally = _tally(tally, logits, yb)
        rec = EpochRecord(epoch, "train", total / seen, *_tally_acc(tally, seen), fold=fold)
        history.append(rec)
        val = None
        if x_val is not None and len(x_val):
            val = evaluate(model, x_val, y_val)
            history.append(EpochRecord(epoch, "val", val.loss, val.acc, val.slip_acc,
                                       val.crumple_acc, fold))
            if best is None or _score(val) > _score(best):
                best, best_epoch, best_model = val, epoch, model.copy()
                stale = 0
            else:
                stale += 1
        else:
            best_epoch, best_model = epoch, model.copy()
        if on_epoch:
            on_epoch(history[-1] if val is not None else rec)
        if cfg.patience and stale >= cfg.patience:
            log.info("early stop at epoch %d", epoch)
            break
    return FitResult(best_model, history, best_epoch, best)


def _tally(tally, logits, yb):
    if len(logits) == 2:
        ok_s = logits[0].argmax(axis=1) == yb[:, 0]
        ok_c = logits[1].argmax(axis=1) == yb[:, 1]
        cur = np.array([np.sum(ok_s & ok_c), ok_s.sum(), ok_c.sum()], dtype=np.int64)
    else:
        cur = np.array([np.sum(logits[0].argmax(axis=1) == yb)], dtype=np.int64)
    return cur if tally is None else tally + cur


def _tally_acc(tally, seen):
    if len(tally) == 3:
        return tuple(float(t) / seen for t in tally)
    return float(tally[0]) / seen, None, None


# -------------------------------------------------------------- runs

@dataclass
class SlipRun:
    model: SlipNet
    scaler: ScalerParams
    history: list
    best_epoch: int
    val: EvalResult
    train_idx: np.ndarray
    val_idx: np.ndarray


def train_slip(dataset: Dataset, cfg: TrainConfig, model_cfg: SlipNetConfig | None = None,
               shapes: Vocab | None = None, on_epoch=None) -> SlipRun:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    x, y = slip_arrays(dataset, shapes)
    tr, va = shuffle_split(len(dataset), cfg.val_fraction, cfg.seed)
    scaler = fit_minmax(x[tr])
    xs = apply_minmax(x, scaler)
    model = SlipNet(model_cfg, seed=derive_seed(cfg.seed, 0) & 0xFFFFFFFF)
    res = fit(model, xs[tr], y[tr], xs[va], y[va], cfg, on_epoch=on_epoch)
    return SlipRun(res.model, scaler, res.history, res.best_epoch, res.best, tr, va)


@dataclass
class FoldResult:
    fold: int
    model: object
    scaler: ScalerParams
    best_epoch: int
    val: EvalResult
    history: list


@dataclass
class CVResult:
    folds: list
    mean_acc: float
    std_acc: float
    history: list = field(default_factory=list)

    @property
    def best(self) -> FoldResult:
        return max(self.folds, key=lambda f: (f.val.acc, -f.fold))


def cross_validate(model_factory: Callable[[int], object], x, y, cfg: TrainConfig,
                   k: int | None = None, on_epoch=None) -> CVResult:
    """Train a fresh model per fold on the other k-1 folds (scaler fitted there too)."""
    k = k or cfg.k_folds
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    folds = kfold(len(x), k, cfg.seed)
    results, history = [], []
    for i, val_idx in enumerate(folds):
        train_idx = np.concatenate([f for j, f in enumerate(folds) if j != i])
        scaler = fit_minmax(x[train_idx])
        xs = apply_minmax(x, scaler)
        model = model_factory(derive_seed(cfg.seed, 1000 + i) & 0xFFFFFFFF)
        res = fit(model, xs[train_idx], y[train_idx], xs[val_idx], y[val_idx], cfg,
                  fold=i, on_epoch=on_epoch)
        results.append(FoldResult(i, res.model, scaler, res.best_epoch, res.best, res.history))
        history.extend(res.history)
    accs = np.array([r.val.acc for r in results])
    return CVResult(results, float(accs.mean()), float(accs.std()), history)


def train_shape(dataset: Dataset, cfg: TrainConfig, model_cfg: ShapeNetConfig | None = None,
                shapes: Vocab | None = None, on_epoch=None) -> CVResult:
    x, y = shape_arrays(dataset, shapes)
    return cross_validate(lambda seed: ShapeNet(model_cfg, seed=seed), x, y, cfg,
                          on_epoch=on_epoch)


# ------------------------------------------------------------ artifacts

METRIC_COLUMNS = ("fold", "epoch", "split", "loss", "acc", "slip_acc", "crumple_acc")


def _cell(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics_csv(path, history) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in history:
            w.writerow([_cell(getattr(r, c)) for c in METRIC_COLUMNS])


def read_metrics_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")


def result_summary(r: EvalResult) -> dict:
    out = {"loss": r.loss, "acc": r.acc}
    if r.slip_acc is not None:
        out["joint_acc"] = r.acc
        out["slip_acc"] = r.slip_acc
        out["crumple_acc"] = r.crumple_acc
    out["n"] = r.n
    out["confusion"] = r.confusion.tolist() if r.confusion is not None else None
    return out
