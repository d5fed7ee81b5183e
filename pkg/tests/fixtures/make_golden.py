"""Regenerate the frozen fixtures in this directory.

Run only when a wire or checkpoint format change is intended:

    python3 tests/fixtures/make_golden.py
"""

from pathlib import Path

from graspsense.checkpoint import load_checkpoint, save_checkpoint
from graspsense.cli import build_parser
from graspsense.engine import InferenceEngine
from graspsense.protocol import FLAG_SHAPE, WireRequest
from graspsense.server import EdgeServer
from graspsense.shapenet import ShapeNetConfig
from graspsense.sim import SimConfig, generate_dataset
from graspsense.training import TrainConfig, train_shape, train_slip

HERE = Path(__file__).parent


def help_text() -> str:
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    parts = [parser.format_help()]
    for name, p in sub.choices.items():
        parts.append(p.format_help())
    return "\n".join(parts)


def main():
    ds = generate_dataset(13, seed=11, config=SimConfig(duration=2.0))
    slip = train_slip(ds, TrainConfig("slip", epochs=4, batch_size=512, seed=11))
    meta = {"task": "slip", "seed": 11, "val_fraction": "0.16", "epoch": slip.best_epoch,
            "n_rows": len(ds)}
    save_checkpoint(HERE / "golden_slip.ckpt", slip.model, meta, slip.scaler, dtype="f32")
    cv = train_shape(ds, TrainConfig("shape", epochs=4, batch_size=512, k_folds=2, seed=11),
                     ShapeNetConfig())
    best = cv.best
    meta = {"task": "shape", "seed": 11, "k": 2, "fold": best.fold, "epoch": best.best_epoch,
            "n_rows": len(ds)}
    save_checkpoint(HERE / "golden_shape.ckpt", best.model, meta, best.scaler, dtype="f32")

    engine = InferenceEngine(load_checkpoint(HERE / "golden_slip.ckpt"),
                             load_checkpoint(HERE / "golden_shape.ckpt"))
    server = EdgeServer(engine, clock=lambda: 0)
    f = ds.frames[137]
    req = WireRequest(1_234_567_890_123, f.torque, f.angle, f.mass, FLAG_SHAPE).pack()
    (HERE / "golden_request.bin").write_bytes(req)
    (HERE / "golden_response.bin").write_bytes(server.handle_frame(req))
    (HERE / "help.txt").write_text(help_text(), encoding="utf-8")


if __name__ == "__main__":
    main()
