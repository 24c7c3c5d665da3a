import subprocess
import sys

import numpy as np
import pytest

from pcompletion import geometry, pipeline
from pcompletion.cli import run_cli


@pytest.fixture
def cloud_file(tmp_path):
    p = tmp_path / "a.xyz"
    geometry.save_xyz(geometry.synth_shape("sphere", 64, 0), p)
    return p


def test_render_single_view(tmp_path, cloud_file):
    out = tmp_path / "m.pgm"
    assert run_cli(["render", "--in", str(cloud_file), "--view", "3", "--out", str(out), "--size", "32x24"]) == 0
    assert out.read_bytes().startswith(b"P5\n24 32\n65535\n")


def test_render_all_views(tmp_path, cloud_file):
    out = tmp_path / "m.pgm"
    assert run_cli(["render", "--in", str(cloud_file), "--view", "all", "--out", str(out), "--size", "16x16"]) == 0
    assert sorted(p.name for p in tmp_path.glob("*.pgm")) == [f"m_{i}.pgm" for i in range(8)]


def test_render_bad_view(tmp_path, cloud_file, capsys):
    out = tmp_path / "m.pgm"
    assert run_cli(["render", "--in", str(cloud_file), "--view", "9", "--out", str(out)]) == 2
    assert "0..7" in capsys.readouterr().err
    assert not list(tmp_path.glob("*.pgm"))


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["render", "--in", "a.xyz"],
    ["render", "--in", "a.xyz", "--view", "1", "--out", "m.pgm", "--frobnicate"],
    ["render", "--in", "a.xyz", "--view", "1", "--out", "m.pgm", "--size", "32"],
    ["gradcheck", "--scope", "everything"],
])
def test_usage_errors(argv, capsys):
    assert run_cli(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_input_is_usage_error(tmp_path):
    assert run_cli(["render", "--in", str(tmp_path / "none.xyz"), "--view", "0",
                    "--out", str(tmp_path / "m.pgm")]) == 2


def test_missing_output_dir_is_usage_error(tmp_path, cloud_file):
    assert run_cli(["render", "--in", str(cloud_file), "--view", "0",
                    "--out", str(tmp_path / "no" / "m.pgm")]) == 2


def test_malformed_cloud_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.xyz"
    bad.write_text("0 0 0\n1 2\n")
    assert run_cli(["render", "--in", str(bad), "--view", "0", "--out", str(tmp_path / "m.pgm")]) == 1
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and "line 2" in err


def test_spare_threads_validation(monkeypatch, tmp_path, cloud_file):
    argv = ["render", "--in", str(cloud_file), "--view", "0", "--out", str(tmp_path / "m.pgm"), "--size", "16x16"]
    monkeypatch.setenv("SPARE_THREADS", "zero")
    assert run_cli(argv) == 2
    monkeypatch.setenv("SPARE_THREADS", "1")
    assert run_cli(argv) == 0


def test_synth_train_complete_eval(tmp_path):
    data = tmp_path / "data"
    assert run_cli(["synth", "--out", str(data), "--shapes", "sphere,torus", "--per-shape", "2",
                    "--points", "128", "--seed", "1"]) == 0
    assert len(pipeline.load_dataset(data)) == 4
    cfg = tmp_path / "run.cfg"
    cfg.write_text("n_points = 128\nrender_size = 16\nbatch_size = 2\nepochs = 1\nfold_widths = 16,16,16\n")
    run = tmp_path / "run"
    assert run_cli(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    ckpt = run / "final.spnt"
    assert ckpt.exists() and (run / "loss_curve.csv").exists()

    partial = next(data.glob("sphere/*.partial.xyz"))
    out = tmp_path / "done.xyz"
    assert run_cli(["complete", "--ckpt", str(ckpt), "--in", str(partial), "--out", str(out)]) == 0
    done = geometry.load_xyz(out)
    assert done.shape == (128, 3) and np.isfinite(done).all()

    report = tmp_path / "report.csv"
    assert run_cli(["eval", "--ckpt", str(ckpt), "--data", str(data), "--report", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "metric,category,value"
    assert {"cd,avg", "emd,avg", "fpd,avg"} <= {",".join(l.split(",")[:2]) for l in lines}


def test_train_bad_config_is_usage_error(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("nonsense = 1\n")
    (tmp_path / "data").mkdir()
    assert run_cli(["train", "--config", str(cfg), "--data", str(tmp_path / "data"), "--out", str(tmp_path / "o")]) == 2


def test_eval_wrong_checkpoint_is_runtime_error(tmp_path):
    ckpt = tmp_path / "x.spnt"
    ckpt.write_bytes(b"not a checkpoint at all")
    (tmp_path / "data").mkdir()
    assert run_cli(["eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "data"),
                    "--report", str(tmp_path / "r.csv")]) == 1


def test_gradcheck_losses_scope(capsys):
    assert run_cli(["gradcheck", "--scope", "losses"]) == 0
    table = capsys.readouterr().out
    assert "chamfer" in table and "FAIL" not in table


def test_module_entry_point(tmp_path, cloud_file):
    res = subprocess.run([sys.executable, "-m", "pcompletion", "render", "--in", str(cloud_file),
                          "--view", "8", "--out", str(tmp_path / "m.pgm")], capture_output=True, text=True)
    assert res.returncode == 2
