import json

import numpy as np
import pytest
from conftest import tiny_config
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from motiondepth.evaluation import (
    EvalReport,
    EvaluationError,
    ScaleMode,
    constant_plane_baseline,
    eigen_metrics,
    evaluate,
    infer_pair,
    inverse_depth_colormap,
    oracle_predictor_report,
    rigid_consistency,
    scene_consistency,
)
from motiondepth.geometry import rotation_matrix
from motiondepth.stillbox import DatasetError, read_pfm, read_ppm
from motiondepth.trainer import Model

# constant-plane baseline on the tiny fixture dataset, computed once
PINNED_GT = {
    "abs_rel": 0.41371832242499246,
    "sq_rel": 2.573153878370592,
    "rmse": 8.878527117157699,
    "rmse_log": 0.6672549302957246,
    "a1": 0.29273080973326177,
    "a2": 0.5656444127543515,
    "a3": 0.7680219441959674,
}
PINNED_P_ABS_REL = 0.962308477110732

depths = arrays(np.float64, 12, elements=st.floats(0.05, 90))


def test_hand_example():
    m = eigen_metrics(np.array([1.0, 2.0]), np.array([2.0, 2.0]))
    assert m["abs_rel"] == 0.25
    assert m["rmse"] == pytest.approx(np.sqrt(0.5), abs=1e-15)
    assert m["a1"] == 0.5


def test_perfect_prediction():
    g = np.random.default_rng(0).uniform(1, 50, 30)
    m = eigen_metrics(g, g)
    assert all(m[k] == 0 for k in ("abs_rel", "sq_rel", "rmse", "rmse_log"))
    assert m["a1"] == m["a2"] == m["a3"] == 1


def test_gt_mode_cancels_doubling():
    g = np.random.default_rng(1).uniform(1, 50, 30)
    mask = np.ones(30, bool)
    s = ScaleMode("GT").factor(2 * g, g, mask)
    assert s == 0.5
    assert eigen_metrics(2 * g * s, g)["abs_rel"] == 0


def test_errors():
    with pytest.raises(EvaluationError, match="empty"):
        eigen_metrics(np.ones(3), np.ones(3), np.zeros(3, bool))
    with pytest.raises(EvaluationError):
        ScaleMode("X")
    with pytest.raises(EvaluationError, match="displacement"):
        ScaleMode("P").factor(np.ones(3), np.ones(3), np.ones(3, bool))


def test_pose_baseline_p_mode_uses_predicted_translation():
    s = ScaleMode("P").factor(np.ones(3), np.ones(3), np.ones(3, bool), displacement=0.3, predicted_displacement=0.1)
    assert s == pytest.approx(3.0)
    assert ScaleMode("P").factor(np.ones(3), np.ones(3), np.ones(3, bool), displacement=0.3, d0=0.1) == pytest.approx(3.0)


@settings(max_examples=60, deadline=None)
@given(depths, depths)
def test_metric_invariants(p, g):
    m = eigen_metrics(p, g)
    assert 0 <= m["a1"] <= m["a2"] <= m["a3"] <= 1
    assert all(np.isfinite(v) for v in m.values())


def test_prediction_is_clamped_before_logs():
    m = eigen_metrics(np.array([0.0, 1e6]), np.array([1.0, 1.0]), cap=(1e-3, 100))
    assert np.isfinite(m["rmse_log"])
    assert m["abs_rel"] == pytest.approx((0.999 + 99) / 2)


@settings(max_examples=60, deadline=None)
@given(depths, depths, st.floats(0.01, 100))
def test_gt_mode_ignores_rescaling(p, g, k):
    mask = np.ones(g.shape, bool)
    a = eigen_metrics(p * ScaleMode("GT").factor(p, g, mask), g)
    b = eigen_metrics(k * p * ScaleMode("GT").factor(k * p, g, mask), g)
    for name in a:
        assert a[name] == pytest.approx(b[name], rel=1e-9, abs=1e-12)


def test_p_mode_sees_rescaling():
    g = np.random.default_rng(2).uniform(2, 20, 50)
    p = g * np.random.default_rng(3).uniform(0.9, 1.1, 50)
    mask = np.ones(50, bool)
    s = ScaleMode("P").factor(p, g, mask, displacement=1.0, d0=1.0)
    a = eigen_metrics(p * s, g)["abs_rel"]
    b = eigen_metrics(2 * p * s, g)["abs_rel"]
    assert b > a


def test_constant_plane_pinned_values(tiny_sequences):
    report = constant_plane_baseline(tiny_sequences, "GT")
    for k, v in PINNED_GT.items():
        assert report.mean[k] == pytest.approx(v, rel=1e-9)
    assert constant_plane_baseline(tiny_sequences, "P").mean["abs_rel"] == pytest.approx(PINNED_P_ABS_REL, rel=1e-9)
    again = constant_plane_baseline(tiny_sequences, "GT")
    assert again.to_json() == report.to_json()


def test_constant_plane_scale_is_median_and_constant_cancels(tiny_sequences):
    a = constant_plane_baseline(tiny_sequences, "GT")
    b = constant_plane_baseline(tiny_sequences, "GT", value=7.5)
    for fa, fb, seq in zip(a.frames, b.frames, tiny_sequences):
        gt = seq.depths[fa.frame]
        assert fa.scale == pytest.approx(np.median(gt[np.isfinite(gt) & (gt <= 100)]))
        for k in fa.metrics:
            assert fa.metrics[k] == pytest.approx(fb.metrics[k], rel=1e-12, abs=1e-15)


def test_oracle_predictor_is_perfect_in_both_modes(tiny_sequences):
    for mode in ("GT", "P"):
        m = oracle_predictor_report(tiny_sequences, mode, d0=0.1).mean
        assert m["abs_rel"] == pytest.approx(0.0, abs=1e-7)
        assert m["a1"] == 1


def test_report_formats(tmp_path, tiny_sequences):
    report = constant_plane_baseline(tiny_sequences, "GT")
    report.write(tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["scale_mode"] == "GT"
    assert len(data["frames"]) == 3
    assert data["valid_pixels"] == sum(f["valid_pixels"] for f in data["frames"])
    lines = (tmp_path / "report.txt").read_text().splitlines()
    header = lines[1]
    cols = ["Abs Rel", "Sq Rel", "RMSE", "RMSE log", "d<1.25", "d<1.25^2", "d<1.25^3"]
    assert [header.index(c) for c in cols] == sorted(header.index(c) for c in cols)
    assert len({len(line) for line in lines[1:]}) == 1
    assert EvalReport("GT").mean["abs_rel"] != EvalReport("GT").mean["abs_rel"]


def test_p_mode_needs_displacement(tiny_sequences):
    seq = tiny_sequences[0]
    bare = type(seq)(seq.name, seq.images, seq.intrinsics, seq.depths, seq.poses, metadata={})
    with pytest.raises(DatasetError, match="displacement"):
        constant_plane_baseline([bare], "P")
    constant_plane_baseline([bare], "GT")


def test_flip_twice_is_no_flip(tiny_sequences):
    from motiondepth.stillbox import flip_vertical

    seqs = [flip_vertical(s) for s in tiny_sequences]
    a = constant_plane_baseline(seqs, "GT", flip_vertical=True)
    b = constant_plane_baseline(tiny_sequences, "GT")
    assert [f.metrics for f in a.frames] == [f.metrics for f in b.frames]


@pytest.fixture(scope="module")
def tiny_model(tmp_path_factory, tiny_sequences):
    from motiondepth.trainer import train

    out = tmp_path_factory.mktemp("model")
    train(tiny_sequences, tiny_config(iterations=2), out)
    return Model.load(out / "model.ckpt")


def test_infer_pair_identity_and_scaling(tiny_model, tiny_sequences):
    seq = tiny_sequences[0]
    a = infer_pair(seq.images[3], seq.images[4], seq.intrinsics, tiny_model, tiny_model.d0, np.eye(3))
    b = infer_pair(seq.images[3], seq.images[4], seq.intrinsics, tiny_model, 3 * tiny_model.d0, np.eye(3))
    np.testing.assert_allclose(b, 3 * a, rtol=1e-12)
    assert a.shape == (32, 32) and np.all(a > 0)


def test_infer_pair_identity_rotation_skips_warp(tiny_model, tiny_sequences, monkeypatch):
    import motiondepth.evaluation as ev

    def boom(*args, **kwargs):
        raise AssertionError("stabilize should not run")

    monkeypatch.setattr(ev, "stabilize", boom)
    seq = tiny_sequences[0]
    infer_pair(seq.images[3], seq.images[4], seq.intrinsics, tiny_model, 1.0, np.eye(3))
    with pytest.raises(AssertionError):
        infer_pair(seq.images[3], seq.images[4], seq.intrinsics, tiny_model, 1.0, rotation_matrix([0.01, 0, 0]))


def test_infer_pair_rotation_sources(tiny_model, tiny_sequences):
    seq = tiny_sequences[0]
    with pytest.raises(EvaluationError, match="rotation"):
        infer_pair(seq.images[3], seq.images[4], seq.intrinsics, tiny_model, 1.0)
    depth = infer_pair(seq.images[3], seq.images[4], seq.intrinsics, tiny_model, 1.0, pose_frames=seq.images[2:5])
    assert depth.shape == (32, 32)
    no_pose = Model(tiny_model.depth_config, None, tiny_model.depth, {}, tiny_model.d0)
    with pytest.raises(EvaluationError):
        infer_pair(seq.images[3], seq.images[4], seq.intrinsics, no_pose, 1.0, pose_frames=seq.images[2:5])


def test_evaluate_model_modes(tmp_path, tiny_model, tiny_sequences):
    for mode in ("GT", "P", "NONE"):
        report = evaluate(tiny_model, tiny_sequences, mode)
        assert len(report.frames) == 3
    evaluate(tiny_model, tiny_sequences, "GT", flip_vertical=True)
    report = evaluate(tiny_model, tiny_sequences, "P", rotation_source="posenet", vis_dir=tmp_path)
    pfm = sorted(tmp_path.glob("*.pfm"))
    assert len(pfm) == 3
    assert read_pfm(pfm[0]).shape == (32, 32)
    assert read_ppm(pfm[0].with_suffix(".ppm")).shape == (3, 32, 32)
    with pytest.raises(EvaluationError):
        evaluate(tiny_model, tiny_sequences, "P", rotation_source="compass")


def test_colormap_range():
    rgb = inverse_depth_colormap(np.array([[1.0, 2.0], [np.inf, 50.0]]))
    assert rgb.shape == (3, 2, 2)
    assert rgb.min() >= 0 and rgb.max() <= 1
    assert rgb[:, 0, 0].sum() > rgb[:, 1, 0].sum()


def test_rigid_consistency_on_fixture(tiny_sequences):
    for seq in tiny_sequences:
        assert scene_consistency(seq) < 0.05
    seq = tiny_sequences[0]
    shuffled = type(seq)(seq.name, seq.images[::-1].copy(), seq.intrinsics, seq.depths, seq.poses)
    assert rigid_consistency(shuffled, 0, 4) > rigid_consistency(seq, 0, 4)
