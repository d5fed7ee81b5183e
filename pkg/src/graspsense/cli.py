"""Command-line entry point: ``graspsense <command> [flags]``.

Settings resolve as built-in defaults < ``--config`` file (key=value) <
explicit flags.  Exit status: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataio import (DatasetError, ScalerParams, Vocab, apply_minmax, kfold, load_dataset,
                     shape_vocab, shuffle_split, write_dataset)
from .engine import InferenceEngine
from .loop import POLICIES, EngineDetector, LoopConfig, OracleDetector, RemoteDetector, \
    closed_loop_bench
from .server import EdgeServer, ServerThread, bench_latency, write_latency_csv
from .shapenet import ShapeNetConfig
from .sim import SimConfig, generate_dataset, parse_mix, read_keyvalue
from .slipnet import SlipNetConfig
from .training import (TrainConfig, _tune_allocator, evaluate, result_summary, shape_arrays,
                       slip_arrays, train_shape, train_slip, write_metrics_csv, write_summary)

log = logging.getLogger("graspsense")

HELP_WIDTH = 88


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=32)


# Each command: {dest: (flag, type, default, help)}.  Defaults live here rather
# than in argparse so a config file can sit between them and the flags.
_SIM_HELP = {
    "rate": "telemetry rate, Hz",
    "duration": "episode length, s",
    "lag": "grip torque time constant, s",
    "t_drop": "continuous slip time before a drop, s",
    "angle_sigma": "joint-angle jitter, rad",
    "angle_tau": "joint-angle correlation time, s",
    "torque_noise": "torque sensor noise, N*m",
    "mass_jitter": "relative per-episode mass jitter",
    "band_scale": "width multiplier of the slip-crush band",
    "label_noise": "probability of a corrupted frame label",
    "slip_drift": "threshold drift, N*m/s",
}
_SIM = {f.name: (f"--{f.name.replace('_', '-')}", float, f.default, _SIM_HELP[f.name])
        for f in fields(SimConfig)}

COMMANDS = {
    "generate": ("write a synthetic labeled telemetry CSV", {
        "out": ("--out", str, None, "output CSV path (required)"),
        "episodes": ("--episodes", int, 100, "number of episodes"),
        "mix": ("--mix", str, None, "shape mix, e.g. sphere_m:0.5,cube_s:0.5 (default uniform)"),
        **_SIM,
    }),
    "train-slip": ("train the slip/crumple detector on a held-out split", {
        "data": ("--data", str, None, "telemetry CSV (required)"),
        "out_dir": ("--out-dir", str, "slip_run", "artifact directory"),
        "lr": ("--lr", float, 0.02, "Adam learning rate"),
        "epochs": ("--epochs", int, 100, "training epochs"),
        "batch_size": ("--batch-size", int, 2048, "minibatch size"),
        "val_fraction": ("--val-fraction", float, 0.16, "held-out fraction"),
        "patience": ("--patience", int, 0, "early-stopping patience in epochs (0 = off)"),
        "n_steps": ("--n-steps", int, 3, "decision steps"),
        "n_d": ("--n-d", int, 32, "decision width"),
        "n_a": ("--n-a", int, 32, "attention width"),
        "gamma": ("--gamma", float, 1.3, "prior relaxation"),
    }),
    "train-shape": ("train the shape classifier with k-fold cross-validation", {
        "data": ("--data", str, None, "telemetry CSV (required)"),
        "out_dir": ("--out-dir", str, "shape_run", "artifact directory"),
        "lr": ("--lr", float, 0.002, "Adam learning rate"),
        "epochs": ("--epochs", int, 200, "training epochs per fold"),
        "batch_size": ("--batch-size", int, 2048, "minibatch size"),
        "folds": ("--folds", int, 10, "number of folds"),
        "patience": ("--patience", int, 0, "early-stopping patience in epochs (0 = off)"),
    }),
    "eval": ("score a checkpoint on the validation rows it was selected on", {
        "checkpoint": ("--checkpoint", str, None, "model checkpoint (required)"),
        "data": ("--data", str, None, "telemetry CSV the model was trained on (required)"),
        "split": ("--split", str, "val", "val (recorded split) or all"),
    }),
    "infer": ("run both detectors over a telemetry CSV", {
        "slip_checkpoint": ("--slip-checkpoint", str, None, "slip checkpoint (required)"),
        "shape_checkpoint": ("--shape-checkpoint", str, None, "shape checkpoint (required)"),
        "data": ("--data", str, None, "telemetry CSV (required)"),
        "out": ("--out", str, None, "output CSV (default stdout)"),
    }),
    "serve": ("run the streaming detector service in the foreground", {
        "slip_checkpoint": ("--slip-checkpoint", str, None, "slip checkpoint (required)"),
        "shape_checkpoint": ("--shape-checkpoint", str, None, "shape checkpoint (required)"),
        "slip_scaler": ("--slip-scaler", str, None, "override the slip checkpoint's scaler CSV"),
        "shape_scaler": ("--shape-scaler", str, None,
                         "override the shape checkpoint's scaler CSV"),
        "vocab": ("--vocab", str, None, "override the shape vocabulary file"),
        "host": ("--host", str, "127.0.0.1", "listen address"),
        "port": ("--port", int, 5555, "listen port"),
        "workers": ("--workers", int, 0, "inference threads (0 = event-loop thread)"),
    }),
    "bench-latency": ("measure request latency against a detector service", {
        "host": ("--host", str, "127.0.0.1", "server address"),
        "port": ("--port", int, None, "server port; omit to start an in-process server"),
        "slip_checkpoint": ("--slip-checkpoint", str, None, "slip checkpoint (in-process)"),
        "shape_checkpoint": ("--shape-checkpoint", str, None, "shape checkpoint (in-process)"),
        "requests": ("--requests", int, 10000, "measured requests"),
        "warmup": ("--warmup", int, 100, "unmeasured warmup requests (at least 100)"),
        "data": ("--data", str, None, "payload CSV (default: synthetic frames)"),
        "shape": ("--shape", int, 0, "1 to request the shape class too"),
        "out": ("--out", str, None, "latency CSV path"),
    }),
    "bench-loop": ("closed-loop grasp benchmark, naive vs feedback operator", {
        "episodes": ("--episodes", int, 100, "episodes per policy"),
        "policy": ("--policy", str, "both", "naive, feedback or both"),
        "detector": ("--detector", str, "engine", "engine, remote or oracle"),
        "slip_checkpoint": ("--slip-checkpoint", str, None, "slip checkpoint (engine)"),
        "shape_checkpoint": ("--shape-checkpoint", str, None, "shape checkpoint (engine)"),
        "host": ("--host", str, "127.0.0.1", "server address (remote)"),
        "port": ("--port", int, 5555, "server port (remote)"),
        "loop_duration": ("--loop-duration", float, 5.0, "seconds per episode"),
        "tick": ("--tick", float, 0.01, "control period, s"),
        "delta": ("--delta", float, 0.05, "correction step as a fraction of the slip torque"),
        "out": ("--out", str, None, "per-episode CSV path"),
        **_SIM,
    }),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graspsense", formatter_class=_formatter,
                     description="Slip, crumple and shape detection for teleoperated grasping.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (summary, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary, formatter_class=_formatter)
        p.add_argument("--seed", type=int, default=None, help="master random seed (default 0)")
        p.add_argument("--config", default=None, help="key=value settings file; flags win")
        p.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
        for dest, (flag, typ, default, text) in opts.items():
            if default is not None:
                text = f"{text} (default {default})"
            p.add_argument(flag, dest=dest, type=typ, default=None, help=text)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, the --config file and explicit flags."""
    opts = COMMANDS[command][1]
    settings = {dest: spec[2] for dest, spec in opts.items()}
    settings["seed"] = 0
    if ns.config:
        for key, value in read_keyvalue(ns.config).items():
            dest = key.replace("-", "_")
            if dest == "seed":
                settings["seed"] = int(value)
            elif dest in opts:
                settings[dest] = opts[dest][1](value)
            else:
                raise UsageError(f"{ns.config}: unknown setting {key!r} for {command}")
    for dest in list(opts) + ["seed"]:
        value = getattr(ns, dest)
        if value is not None:
            settings[dest] = value
    return settings


def _require(cfg: dict, *names):
    missing = [COMMANDS_FLAG[n] for n in names if cfg.get(n) is None]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join(missing)}")


COMMANDS_FLAG = {dest: spec[0] for _, opts in COMMANDS.values() for dest, spec in opts.items()}


def _sim_config(cfg: dict) -> SimConfig:
    return SimConfig(**{k: cfg[k] for k in _SIM})


def _print_config(command: str, cfg: dict) -> None:
    print(f"# {command} seed={cfg['seed']}", file=sys.stderr)
    for k in sorted(cfg):
        print(f"# {k}={cfg[k]}", file=sys.stderr)


def _epoch_logger(r):
    fold = "" if r.fold is None else f"fold {r.fold} "
    if r.split == "val":
        log.info("%sepoch %d val loss %.5f acc %.4f", fold, r.epoch, r.loss, r.acc)


# ------------------------------------------------------------ commands

def cmd_generate(cfg):
    _require(cfg, "out")
    mix = parse_mix(cfg["mix"]) if cfg["mix"] else None
    ds = generate_dataset(cfg["episodes"], mix, cfg["seed"], _sim_config(cfg))
    write_dataset(cfg["out"], ds.frames, ds.labels)
    print(f"wrote {len(ds)} frames to {cfg['out']}")


def cmd_train_slip(cfg):
    _require(cfg, "data")
    _tune_allocator()
    ds = load_dataset(cfg["data"])
    tcfg = TrainConfig("slip", cfg["lr"], cfg["epochs"], cfg["batch_size"], cfg["val_fraction"],
                       seed=cfg["seed"], patience=cfg["patience"])
    mcfg = SlipNetConfig(n_steps=cfg["n_steps"], n_d=cfg["n_d"], n_a=cfg["n_a"],
                         gamma=cfg["gamma"])
    run = train_slip(ds, tcfg, mcfg, on_epoch=_epoch_logger)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    meta = {"task": "slip", "seed": cfg["seed"], "val_fraction": repr(cfg["val_fraction"]),
            "epoch": run.best_epoch, "n_rows": len(ds), "shapes": ",".join(_shape_names())}
    save_checkpoint(out / "model.ckpt", run.model, meta, run.scaler)
    run.scaler.write(out / "scaler.csv")
    write_metrics_csv(out / "metrics.csv", run.history)
    write_summary(out / "summary.json", {"best_epoch": run.best_epoch, "seed": cfg["seed"],
                                         "val": result_summary(run.val)})
    print(f"best epoch {run.best_epoch}: val loss {run.val.loss:.5f} joint acc "
          f"{run.val.acc:.4f} (slip {run.val.slip_acc:.4f}, crumple {run.val.crumple_acc:.4f})")
    print(f"artifacts in {out}")


def _shape_names():
    return shape_vocab().names


def cmd_train_shape(cfg):
    _require(cfg, "data")
    _tune_allocator()
    ds = load_dataset(cfg["data"])
    tcfg = TrainConfig("shape", cfg["lr"], cfg["epochs"], cfg["batch_size"],
                       k_folds=cfg["folds"], seed=cfg["seed"], patience=cfg["patience"])
    cv = train_shape(ds, tcfg, ShapeNetConfig(), on_epoch=_epoch_logger)
    best = cv.best
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    meta = {"task": "shape", "seed": cfg["seed"], "k": cfg["folds"], "fold": best.fold,
            "epoch": best.best_epoch, "n_rows": len(ds), "shapes": ",".join(_shape_names())}
    save_checkpoint(out / "model.ckpt", best.model, meta, best.scaler)
    best.scaler.write(out / "scaler.csv")
    write_metrics_csv(out / "metrics.csv", cv.history)
    write_summary(out / "summary.json", {
        "seed": cfg["seed"], "mean_acc": cv.mean_acc, "std_acc": cv.std_acc,
        "folds": [{"fold": f.fold, "best_epoch": f.best_epoch, **result_summary(f.val)}
                  for f in cv.folds]})
    print(f"{cfg['folds']}-fold mean acc {cv.mean_acc:.4f} (std {cv.std_acc:.4f}); "
          f"kept fold {best.fold}")
    print(f"artifacts in {out}")


def eval_rows(ckpt, n: int, split: str) -> np.ndarray:
    """Indices of the rows a checkpoint was validated on."""
    if split == "all":
        return np.arange(n)
    if split != "val":
        raise UsageError(f"--split must be val or all, not {split!r}")
    meta = ckpt.meta
    if "n_rows" in meta and int(meta["n_rows"]) != n:
        raise UsageError(f"checkpoint was trained on {meta['n_rows']} rows, data has {n}")
    seed = int(meta.get("seed", 0))
    if meta.get("task") == "shape":
        return kfold(n, int(meta["k"]), seed)[int(meta["fold"])]
    return shuffle_split(n, float(meta.get("val_fraction", 0.16)), seed)[1]


def cmd_eval(cfg):
    _require(cfg, "checkpoint", "data")
    ckpt = load_checkpoint(cfg["checkpoint"])
    ds = load_dataset(cfg["data"])
    if ckpt.model.kind == "slipnet":
        x, y = slip_arrays(ds, ckpt.shapes)
    else:
        x, y = shape_arrays(ds, ckpt.shapes)
    idx = eval_rows(ckpt, len(ds), cfg["split"])
    r = evaluate(ckpt.model, apply_minmax(x[idx], ckpt.scaler), y[idx])
    print(f"loss={r.loss!r}")
    print(f"acc={r.acc!r}")
    if r.slip_acc is not None:
        print(f"slip_acc={r.slip_acc!r}")
        print(f"crumple_acc={r.crumple_acc!r}")
    print(f"n={r.n}")


def _engine(cfg) -> InferenceEngine:
    _require(cfg, "slip_checkpoint", "shape_checkpoint")
    slip = load_checkpoint(cfg["slip_checkpoint"])
    shape = load_checkpoint(cfg["shape_checkpoint"])
    if cfg.get("slip_scaler"):
        slip.scaler = ScalerParams.read(cfg["slip_scaler"])
    if cfg.get("shape_scaler"):
        shape.scaler = ScalerParams.read(cfg["shape_scaler"])
    if cfg.get("vocab"):
        vocab = Vocab.read(cfg["vocab"])
        if len(vocab) != shape.model.config.widths[-1]:
            raise UsageError("vocabulary size does not match the shape model's outputs")
        slip.meta["shapes"] = ",".join(vocab.names)
    return InferenceEngine(slip, shape)


INFER_COLUMNS = ("timestamp_us", "slip", "crumple", "shape", "slip_conf", "crumple_conf",
                 "shape_conf")


def cmd_infer(cfg):
    _require(cfg, "data")
    engine = _engine(cfg)
    ds = load_dataset(cfg["data"])
    fh = open(cfg["out"], "w", encoding="utf-8", newline="") if cfg["out"] else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INFER_COLUMNS)
        for f in ds.frames:
            d = engine.detect_frame(f)
            w.writerow([f.timestamp_us, d.slip, d.crumple, engine.shapes.names[d.shape],
                        f"{d.slip_conf:.6f}", f"{d.crumple_conf:.6f}", f"{d.shape_conf:.6f}"])
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_serve(cfg):
    server = EdgeServer(_engine(cfg), cfg["host"], cfg["port"], cfg["workers"])
    print(f"serving on {cfg['host']}:{cfg['port']} (Ctrl-C to stop)")
    sys.stdout.flush()
    try:
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        pass


def _payloads(cfg):
    if cfg["data"]:
        frames = load_dataset(cfg["data"]).frames
    else:
        frames = generate_dataset(4, seed=cfg["seed"]).frames
    if not frames:
        raise UsageError("payload source has no frames")
    return frames


def _report(reports: dict, out):
    for name, rep in reports.items():
        print(f"{name}: n={rep.count} p50={rep.p50:.1f}us p90={rep.p90:.1f}us "
              f"p99={rep.p99:.1f}us max={rep.max:.1f}us throughput={rep.throughput:.0f}/s")
    if out:
        write_latency_csv(out, reports)


def cmd_bench_latency(cfg):
    if cfg["warmup"] < 100:
        raise UsageError("--warmup must be at least 100")
    payloads = _payloads(cfg)
    flags = 1 if cfg["shape"] else 0
    if cfg["port"] is None:
        with ServerThread(EdgeServer(_engine(cfg))) as st:
            reports = bench_latency(*st.address, payloads, cfg["requests"], cfg["warmup"], flags)
    else:
        reports = bench_latency(cfg["host"], cfg["port"], payloads, cfg["requests"],
                                cfg["warmup"], flags)
    _report(reports, cfg["out"])


LOOP_COLUMNS = ("policy", "episode", "shape", "initial_command", "dropped", "drop_time",
                "ticks", "crumple_ticks")


def cmd_bench_loop(cfg):
    policies = POLICIES if cfg["policy"] == "both" else (cfg["policy"],)
    if any(p not in POLICIES for p in policies):
        raise UsageError("--policy must be naive, feedback or both")
    loop_cfg = LoopConfig(cfg["loop_duration"], cfg["tick"], cfg["delta"],
                          sim=_sim_config(cfg))
    detector = None
    if "feedback" in policies:
        kind = cfg["detector"]
        if kind == "engine":
            detector = EngineDetector(_engine(cfg))
        elif kind == "remote":
            detector = RemoteDetector(cfg["host"], cfg["port"])
        elif kind == "oracle":
            detector = OracleDetector()
        else:
            raise UsageError("--detector must be engine, remote or oracle")
    results = [closed_loop_bench(cfg["episodes"], p, detector, cfg["seed"], loop_cfg)
               for p in policies]
    for r in results:
        print(f"{r.policy}: drops={r.drops}/{len(r.episodes)} "
              f"crumple_fraction={r.crumple_fraction:.4f}")
        if r.latency is not None:
            _report({"detector": r.latency}, None)
    if len(results) == 2 and results[0].crumple_fraction > 0:
        cut = 1.0 - results[1].crumple_fraction / results[0].crumple_fraction
        print(f"crumple reduction {cut:.1%}, drops {results[0].drops} -> {results[1].drops}")
    if cfg["out"]:
        with open(cfg["out"], "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOOP_COLUMNS)
            for r in results:
                for i, e in enumerate(r.episodes):
                    w.writerow([r.policy, i, e.shape, repr(e.initial_command), int(e.dropped),
                                "" if e.drop_time is None else repr(e.drop_time), e.ticks,
                                e.crumple_ticks])
    if isinstance(detector, RemoteDetector):
        detector.close()


HANDLERS = {
    "generate": cmd_generate, "train-slip": cmd_train_slip, "train-shape": cmd_train_shape,
    "eval": cmd_eval, "infer": cmd_infer, "serve": cmd_serve,
    "bench-latency": cmd_bench_latency, "bench-loop": cmd_bench_loop,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("graspsense: a command is required (see --help)")
        logging.basicConfig(level=ns.log_level.upper(), stream=sys.stderr,
                            format="%(levelname)s %(message)s", force=True)
        cfg = resolve(ns.command, ns)
        _print_config(ns.command, cfg)
        HANDLERS[ns.command](cfg)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, DatasetError, CheckpointError, FileNotFoundError, IsADirectoryError,
            KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConnectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report, don't trace, at the top level
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
