import csv
import json
import socket

import pytest
from conftest import FIXTURES

from graspsense.cli import COMMANDS, build_parser, run
from graspsense.training import read_metrics_csv

GEN = ["generate", "--episodes", "13", "--duration", "2", "--seed", "7"]
FAST_SLIP = ["--epochs", "3", "--batch-size", "512", "--n-d", "8", "--n-a", "8"]
FAST_SHAPE = ["--epochs", "3", "--batch-size", "512", "--folds", "2"]


def help_text() -> str:
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    return "\n".join([parser.format_help()] + [p.format_help() for p in sub.choices.values()])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(GEN + ["--out", str(d / "d.csv")]) == 0
    assert run(["train-slip", "--data", str(d / "d.csv"), "--seed", "7",
                "--out-dir", str(d / "slip")] + FAST_SLIP) == 0
    assert run(["train-shape", "--data", str(d / "d.csv"), "--seed", "7",
                "--out-dir", str(d / "shape")] + FAST_SHAPE) == 0
    return d


def test_help_matches_fixture():
    assert help_text() == (FIXTURES / "help.txt").read_text(encoding="utf-8")


def test_help_lists_every_flag():
    text = help_text()
    for _, opts in COMMANDS.values():
        for flag, *_ in opts.values():
            assert flag in text
    assert all(f in text for f in ("--seed", "--config", "--log-level"))


def test_generate_twice_identical(work, tmp_path):
    assert run(GEN + ["--out", str(tmp_path / "again.csv")]) == 0
    assert (tmp_path / "again.csv").read_bytes() == (work / "d.csv").read_bytes()


def test_train_slip_artifacts(work):
    names = {p.name for p in (work / "slip").iterdir()}
    assert names == {"model.ckpt", "scaler.csv", "metrics.csv", "summary.json"}
    rows = read_metrics_csv(work / "slip" / "metrics.csv")
    assert [r["split"] for r in rows] == ["train", "val"] * 3


def _eval(capsys, ckpt, data):
    assert run(["eval", "--checkpoint", str(ckpt), "--data", str(data)]) == 0
    out = capsys.readouterr().out
    return dict(line.split("=", 1) for line in out.strip().splitlines())


@pytest.mark.parametrize("kind", ["slip", "shape"])
def test_eval_matches_training_metrics(work, capsys, kind):
    got = _eval(capsys, work / kind / "model.ckpt", work / "d.csv")
    s = json.loads((work / kind / "summary.json").read_text())
    rows = read_metrics_csv(work / kind / "metrics.csv")
    if kind == "slip":
        epoch, fold = s["best_epoch"], ""
    else:
        best = max(s["folds"], key=lambda f: f["acc"])
        epoch, fold = best["best_epoch"], str(best["fold"])
    row = next(r for r in rows if r["split"] == "val" and int(r["epoch"]) == epoch
               and r["fold"] == fold)
    for key in ("loss", "acc") + (("slip_acc", "crumple_acc") if kind == "slip" else ()):
        assert float(got[key]) == pytest.approx(float(row[key]), abs=1e-12)


def test_training_artifacts_deterministic(work, tmp_path):
    assert run(["train-slip", "--data", str(work / "d.csv"), "--seed", "7",
                "--out-dir", str(tmp_path / "slip")] + FAST_SLIP) == 0
    assert run(["train-shape", "--data", str(work / "d.csv"), "--seed", "7",
                "--out-dir", str(tmp_path / "shape")] + FAST_SHAPE) == 0
    for kind in ("slip", "shape"):
        for name in ("model.ckpt", "scaler.csv", "metrics.csv", "summary.json"):
            assert (tmp_path / kind / name).read_bytes() == (work / kind / name).read_bytes()


def test_infer_writes_one_row_per_frame(work, capsys):
    out = work / "pred.csv"
    assert run(["infer", "--slip-checkpoint", str(work / "slip" / "model.ckpt"),
                "--shape-checkpoint", str(work / "shape" / "model.ckpt"),
                "--data", str(work / "d.csv"), "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    with open(work / "d.csv", newline="") as fh:
        n = sum(1 for _ in fh) - 1
    assert len(rows) == n and set(rows[0]) >= {"slip", "crumple", "shape"}


def test_bench_loop_and_latency(work, tmp_path, capsys):
    ck = ["--slip-checkpoint", str(work / "slip" / "model.ckpt"),
          "--shape-checkpoint", str(work / "shape" / "model.ckpt")]
    assert run(["bench-loop", "--episodes", "3", "--loop-duration", "1",
                "--out", str(tmp_path / "loop.csv")] + ck) == 0
    assert "naive: drops=" in capsys.readouterr().out
    with open(tmp_path / "loop.csv", newline="") as fh:
        assert len(list(csv.reader(fh))) == 7
    assert run(["bench-latency", "--requests", "200", "--out", str(tmp_path / "lat.csv")]
               + ck) == 0
    assert "p99=" in capsys.readouterr().out


def test_resolved_config_printed_first(capsys, tmp_path):
    assert run(GEN + ["--out", str(tmp_path / "x.csv"), "--episodes", "1"]) == 0
    err = capsys.readouterr().err.splitlines()
    assert err[0] == "# generate seed=7" and "# episodes=1" in err


def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("episodes=2\nseed=3\nduration=1\n")
    out = tmp_path / "x.csv"
    assert run(["generate", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    err = capsys.readouterr().err
    assert "# seed=4" in err and "# episodes=2" in err and "# duration=1.0" in err


@pytest.mark.parametrize("argv", [
    [], ["nope"], ["generate", "--bogus", "1", "--out", "x"], ["generate"],
    ["generate", "--episodes", "ten", "--out", "x"],
    ["eval", "--checkpoint", "/nonexistent.ckpt", "--data", "/nonexistent.csv"],
    ["bench-latency", "--warmup", "5"],
])
def test_validation_errors_exit_1(argv, capsys):
    assert run(argv) == 1
    assert capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("lr=0.1\n")
    assert run(["generate", "--config", str(cfg), "--out", str(tmp_path / "x.csv")]) == 1


def test_unreachable_server_exit_2(work, capsys):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    assert run(["bench-latency", "--port", str(port), "--requests", "10"]) == 2
    assert "cannot reach" in capsys.readouterr().err


def test_help_exits_0(capsys):
    assert run(["generate", "--help"]) == 0
    assert "--episodes" in capsys.readouterr().out
