import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from motiondepth import tape as T
from motiondepth.cli import build_parser, main
from motiondepth.stillbox import read_pfm, write_ppm
from motiondepth.tape import Tensor, as_tensor

TINY = {"base_channels": 4, "num_levels": 3, "num_scales": 3, "pose_stride2": 3, "seq_len": 3, "batch_size": 1, "d0": 0.1, "log_every": 1}


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_root):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train", "--data", str(tiny_root), "--out", str(out), "--config", str(cfg), "--iterations", "2", "--supervise-orientation"]) == 0
    return out


def test_generate_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["generate", "--out", str(tmp_path / d), "--scenes", "2", "--frames", "20", "--seed", "7", "--resolution", "32"]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert len(a) == 2 * 40 + 2 + 1
    assert a == b


def test_generate_defaults():
    args = build_parser().parse_args(["generate", "--out", "x"])
    assert args.frames == 20
    assert args.resolution == (64, 64)


def test_invalid_resolution_exits_1(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path), "--resolution", "50"]) == 1
    assert "multiples of 32" in capsys.readouterr().err


def test_unknown_flag_and_missing_data(tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--colour"]) == 1
    assert main(["train", "--out", str(tmp_path)]) == 1
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 1


def test_bad_config_reports_line(tmp_path, tiny_root, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n "lr": 0.1,\n "seed" 3\n}')
    assert main(["train", "--data", str(tiny_root), "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 1
    assert "line 3" in capsys.readouterr().err


def test_train_outputs(trained, caplog):
    rows = (trained / "loss_log.csv").read_text().splitlines()
    assert rows[0] == "iteration,L_p,L_g,total,photo_l1"
    assert len(rows) == 3
    saved = json.loads((trained / "config.json").read_text())
    assert saved["supervision"] == "orientation" and saved["iterations"] == 2 and saved["base_channels"] == 4


def test_train_logs_orientation_mode(tmp_path, tiny_root):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    proc = subprocess.run(
        [sys.executable, "-m", "motiondepth.cli", "train", "--data", str(tiny_root), "--out", str(tmp_path / "o"), "--config", str(cfg), "--iterations", "1", "--supervise-orientation"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "orientation supervision" in proc.stderr


def test_eval_baseline_needs_no_checkpoint(tmp_path, tiny_root, capsys):
    assert main(["eval", "--data", str(tiny_root), "--baseline", "constant-plane", "--scale-mode", "gt", "--split", "all", "--out", str(tmp_path)]) == 0
    assert "Abs Rel" in capsys.readouterr().out
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["predictor"] == "constant_plane" and report["scale_mode"] == "GT"


def test_eval_model_and_flip(tmp_path, tiny_root, trained):
    assert main(["eval", "--data", str(tiny_root), "--ckpt", str(trained / "model.ckpt"), "--scale-mode", "p", "--flip", "--out", str(tmp_path), "--vis"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["flip_vertical"] and report["scale_mode"] == "P"
    assert list((tmp_path / "depth").glob("*.pfm"))


def test_eval_p_mode_without_displacement_exits_1(tmp_path, tiny_root):
    data = tmp_path / "d"
    shutil.copytree(tiny_root, data)
    meta_path = data / "scene_0002" / "metadata.json"
    meta = json.loads(meta_path.read_text())
    for f in meta["frames"]:
        f["displacement"] = None
    meta_path.write_text(json.dumps(meta))
    assert main(["eval", "--data", str(data), "--baseline", "constant-plane", "--scale-mode", "p"]) == 1
    assert main(["eval", "--data", str(data), "--baseline", "constant-plane", "--scale-mode", "gt"]) == 0


def test_eval_needs_ckpt_or_baseline(tiny_root):
    assert main(["eval", "--data", str(tiny_root)]) == 1


def test_infer(tmp_path, tiny_root, trained):
    ref, target = tiny_root / "scene_0000" / "frame_03.ppm", tiny_root / "scene_0000" / "frame_04.ppm"
    out = tmp_path / "d.pfm"
    args = ["infer", "--ckpt", str(trained / "model.ckpt"), "--ref", str(ref), "--target", str(target), "--displacement", "0.3", "--out", str(out)]
    assert main(args + ["--angles", "0", "0", "0", "--vis", str(tmp_path / "d.ppm")]) == 0
    depth = read_pfm(out)
    assert depth.shape == (32, 32) and np.all(depth > 0)
    assert (tmp_path / "d.ppm").exists()
    frames = [str(tiny_root / "scene_0000" / f"frame_{k:02d}.ppm") for k in (2, 3, 4)]
    assert main(args + ["--pose-frames", *frames]) == 0
    assert main(args) == 1
    small = tmp_path / "small.ppm"
    write_ppm(small, np.zeros((3, 8, 8)))
    assert main(["infer", "--ckpt", str(trained / "model.ckpt"), "--ref", str(small), "--target", str(target), "--displacement", "1", "--angles", "0", "0", "0", "--out", str(out)]) == 1


def test_gradcheck_and_selftest(capsys):
    assert main(["gradcheck", "--probes", "20"]) == 0
    out = capsys.readouterr().out
    assert "pipeline" in out and "FAIL" not in out
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_gradcheck_negative_control(monkeypatch, capsys):
    def bad_exp(a):
        a = as_tensor(a)
        out = np.exp(a.data)
        return Tensor._result(out, (a,), lambda g: (g * out * 1.1,))

    monkeypatch.setattr(T, "exp", bad_exp)
    assert main(["gradcheck", "--probes", "20"]) == 2
    assert "FAIL" in capsys.readouterr().out


def test_help_lists_flags(capsys):
    for cmd, flags in {
        "generate": ["--out", "--scenes", "--frames", "--resolution", "--seed"],
        "train": ["--data", "--config", "--out", "--supervise-orientation", "--resume"],
        "eval": ["--data", "--ckpt", "--scale-mode", "--flip", "--baseline"],
        "gradcheck": ["--seed", "--size"],
    }.items():
        assert main([cmd, "--help"]) == 0
        text = capsys.readouterr().out
        assert all(f in text for f in flags)
