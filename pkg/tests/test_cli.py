import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from ropecast.cli import EXIT_CODES, run

GOLDEN = Path(__file__).parent / "golden"


def cli(*argv):
    return subprocess.run([sys.executable, "-m", "ropecast.cli", *map(str, argv)], capture_output=True, text=True)


def test_inspect_rope(capsys):
    assert run(["inspect-rope", "--dim", "4"]) == 0
    assert capsys.readouterr().out == "ω = [1.0, 0.01]\n"


def test_inspect_rope_table(capsys, tmp_path):
    out = tmp_path / "rope.txt"
    assert run(["inspect-rope", "--dim", "2", "--max-pos", "1", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert out.read_text() == text
    assert text.splitlines()[-1].split() == ["0", "1", "1", "0.540302", "0.841471"]
    assert yaml.safe_load(Path(f"{out}.config.yaml").read_text())["dim"] == 2


def test_inspect_rope_odd_dim(capsys):
    assert run(["inspect-rope", "--dim", "3"]) == EXIT_CODES["usage-error"]
    assert "error: usage-error" in capsys.readouterr().err


@pytest.mark.parametrize("task", ["tryon", "garment_reconstruction"])
def test_inspect_layout_golden(task, capsys):
    assert run(["inspect-layout", "--task", task, "--size", "4x4"]) == 0
    assert capsys.readouterr().out == (GOLDEN / f"layout_{task}_4x4.txt").read_text()


def test_inspect_layout_no_adaptive(capsys):
    assert run(["inspect-layout", "--task", "tryon", "--size", "2x2", "--no-adaptive"]) == 0
    rows = [line.split() for line in capsys.readouterr().out.splitlines()[1:]]
    assert {r[2] for r in rows} == {"0"}
    assert [int(r[4]) for r in rows if r[1] == "target"] == [4, 5, 4, 5]


def test_missing_checkpoint():
    proc = cli("sample", "--ckpt", "missing")
    assert proc.returncode == 4
    assert "checkpoint-not-found" in proc.stderr


def test_invalid_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert run(["eval", "--ckpt", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "r.json")]) == 5
    assert "error: checkpoint-invalid" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["inspect-rope"], ["inspect-rope", "--dim", "4", "--frobnicate"],
                                  ["inspect-layout", "--task", "tryon", "--size", "4by4"]])
def test_usage_errors(argv, capsys):
    assert run(argv) == 2
    assert capsys.readouterr().err.startswith("error: usage-error")


def test_config_error_exit(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  stepz: 1\n")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "train.stepz" in capsys.readouterr().err


def test_dataset_error_exit(tmp_path, capsys):
    assert run(["data", "gen", "--out", str(tmp_path), "--n", "2", "--seed", "0"]) == 0
    (tmp_path / "000000" / "target_image.png").write_bytes(b"x")
    assert run(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(tmp_path),
                "--out", str(tmp_path / "r.json")]) == 4
    capsys.readouterr()
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"data:\n  dir: {tmp_path}\n")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 6
    err = capsys.readouterr().err
    assert "000000/target_image.png" in err and "error: dataset-error" in err


def test_selftest():
    proc = cli("selftest")
    assert proc.returncode == 0, proc.stdout + proc.stderr


def test_train_eval_sample_pipeline(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(["data", "gen", "--out", str(data), "--n", "3", "--seed", "4"]) == 0
    assert (data / "manifest.jsonl").exists() and (data / "resolved_config.yaml").exists()

    out = tmp_path / "run"
    overrides = ["model.d_model=16", "model.n_heads=2", "model.depth=1", "train.steps=2", "train.batch_size=2",
                 f"data.dir={data}"]
    argv = ["train", "--out", str(out), "--seed", "3"]
    for o in overrides:
        argv += ["--set", o]
    assert run(argv) == 0
    resolved = yaml.safe_load((out / "resolved_config.yaml").read_text())
    assert resolved["train"]["seed"] == 3 and resolved["model"]["d_model"] == 16

    report = tmp_path / "report.json"
    argv = ["eval", "--ckpt", str(out / "final.ckpt"), "--data", str(data), "--out", str(report), "--steps", "2"]
    assert run(argv) == 0
    first = report.read_text()
    assert run(argv) == 0
    assert report.read_text() == first
    assert json.loads(first)["tasks"]["tryon"]["n"] == 3
    assert Path(f"{report}.config.yaml").exists()

    sheets = tmp_path / "sheets"
    assert run(["sample", "--ckpt", str(out / "final.ckpt"), "--data", str(data), "--count", "2", "--steps", "2",
                "--out", str(sheets)]) == 0
    assert sorted(p.name for p in sheets.iterdir()) == ["resolved_config.yaml", "sample_000.png", "sample_001.png"]
    capsys.readouterr()


def test_bad_set_override(tmp_path, capsys):
    assert run(["train", "--out", str(tmp_path), "--set", "nonsense"]) == 3
    assert "SECTION.KEY=VALUE" in capsys.readouterr().err
