"""Depth evaluation: Eigen metrics, scale-factor protocols, baselines and pair inference."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tape as T
from .geometry import Intrinsics, NominalDisplacement, absolute_depth
from .networks import depthnet_forward, posenet_forward
from .losses import photometric_l1
from .stillbox import SKY_SENTINEL, DatasetError, Sequence, flip_vertical, relative_pose, write_pfm, write_ppm
from .tape import Tensor
from .trainer import Model
from .warp import inverse_warp, stabilize

log = logging.getLogger(__name__)

DEFAULT_CAP = (1e-3, 100.0)
METRIC_NAMES = ["abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3"]
METRIC_HEADERS = ["Abs Rel", "Sq Rel", "RMSE", "RMSE log", "d<1.25", "d<1.25^2", "d<1.25^3"]
SCALE_TAGS = ("GT", "P", "NONE")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleMode:
    """How raw predictions are rescaled before scoring.

    ``GT`` uses the per-frame median ratio, ``P`` the measured displacement
    (divided by the nominal one, or by the predicted translation norm for
    pose-predicting baselines), ``NONE`` leaves the output untouched.
    """

    tag: str = "P"

    def __post_init__(self):
        if self.tag not in SCALE_TAGS:
            raise EvaluationError(f"scale mode must be one of {SCALE_TAGS}, got {self.tag!r}")

    def factor(
        self,
        pred: np.ndarray,
        gt: np.ndarray,
        mask: np.ndarray,
        displacement: float | None = None,
        d0: float = 1.0,
        predicted_displacement: float | None = None,
    ) -> float:
        if self.tag == "NONE":
            return 1.0
        if self.tag == "GT":
            return float(np.median(gt[mask]) / np.median(pred[mask]))
        if displacement is None:
            raise EvaluationError("P scale mode needs the measured displacement")
        if predicted_displacement is not None:
            if not predicted_displacement > 0:
                raise EvaluationError("predicted translation magnitude must be positive")
            return float(displacement / predicted_displacement)
        return float(displacement / d0)


def eigen_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None, cap=DEFAULT_CAP) -> dict[str, float]:
    """Standard depth error and accuracy measures over ``mask`` (pred already scaled)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    mask = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise EvaluationError("evaluation mask is empty")
    g = gt[mask]
    if np.any(~(g > 0)):
        raise EvaluationError("ground truth must be positive on the mask")
    p = np.clip(pred[mask], cap[0], cap[1])
    assert np.all(p > 0)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return {
        "abs_rel": float(np.mean(np.abs(diff) / g)),
        "sq_rel": float(np.mean(diff**2 / g)),
        "rmse": float(np.sqrt(np.mean(diff**2))),
        "rmse_log": float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        "a1": float(np.mean(ratio < 1.25)),
        "a2": float(np.mean(ratio < 1.25**2)),
        "a3": float(np.mean(ratio < 1.25**3)),
    }


def gt_mask(gt: np.ndarray, cap=DEFAULT_CAP) -> np.ndarray:
    """Finite ground truth inside the cap; sky (inf) drops out."""
    return np.isfinite(gt) & (gt >= cap[0]) & (gt <= cap[1])


# -- reports -----------------------------------------------------------------

@dataclass
class FrameResult:
    scene: str
    frame: int
    metrics: dict[str, float]
    valid_pixels: int
    scale: float


@dataclass
class EvalReport:
    scale_mode: str
    frames: list[FrameResult] = field(default_factory=list)
    flip_vertical: bool = False
    predictor: str = "model"

    @property
    def mean(self) -> dict[str, float]:
        if not self.frames:
            return {k: float("nan") for k in METRIC_NAMES}
        return {k: float(np.mean([f.metrics[k] for f in self.frames])) for k in METRIC_NAMES}

    def to_dict(self) -> dict:
        return {
            "predictor": self.predictor,
            "scale_mode": self.scale_mode,
            "flip_vertical": self.flip_vertical,
            "mean": self.mean,
            "valid_pixels": int(sum(f.valid_pixels for f in self.frames)),
            "frames": [asdict(f) for f in self.frames],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_table(self) -> str:
        """Plain-text table, one row per frame plus the mean."""
        name_w = max([len("frame"), len("mean")] + [len(f"{f.scene}:{f.frame}") for f in self.frames])
        col_w = [max(len(h), 8) for h in METRIC_HEADERS]
        head = "frame".ljust(name_w) + "  " + "  ".join(h.rjust(w) for h, w in zip(METRIC_HEADERS, col_w))
        head += "  " + "pixels".rjust(7)
        lines = [f"# predictor={self.predictor} scale={self.scale_mode} flip_vertical={self.flip_vertical}", head]

        def row(label, metrics, pixels):
            cells = "  ".join(f"{metrics[k]:.4f}".rjust(w) for k, w in zip(METRIC_NAMES, col_w))
            return label.ljust(name_w) + "  " + cells + "  " + str(pixels).rjust(7)

        for f in self.frames:
            lines.append(row(f"{f.scene}:{f.frame}", f.metrics, f.valid_pixels))
        lines.append(row("mean", self.mean, sum(f.valid_pixels for f in self.frames)))
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "report.txt").write_text(self.to_table())


# -- inference ---------------------------------------------------------------

def infer_pair(
    ref: np.ndarray,
    target: np.ndarray,
    intrinsics: Intrinsics,
    model: Model,
    displacement: float,
    rotation: np.ndarray | None = None,
    pose_frames: np.ndarray | None = None,
    ref_index: int | None = None,
) -> np.ndarray:
    """Absolute depth [H, W] for ``target`` from a two-frame pair.

    ``rotation`` is the rotation part of ``T_{target->ref}``.  Without it the
    rotation comes from PoseNet run on ``pose_frames`` [N, 3, H, W] (target
    last, reference at ``ref_index``, by default the one before the target).
    """
    ref = np.asarray(ref, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rotation is None:
        if pose_frames is None or not model.pose:
            raise EvaluationError("inference needs a known rotation or PoseNet weights with input frames")
        rotation = estimate_rotation(pose_frames, model, ref_index)
    with T.no_grad():
        rotation = np.asarray(rotation, dtype=np.float64)
        if np.array_equal(rotation, np.eye(3)):
            stab = ref
        else:
            stab = stabilize(ref, rotation, intrinsics).image.data
        zeta = depthnet_forward(Tensor(stab), Tensor(target), model.depth, model.depth_config)[0].data
    return absolute_depth(zeta, displacement, NominalDisplacement(model.d0))


def estimate_rotation(frames: np.ndarray, model: Model, ref_index: int | None = None) -> np.ndarray:
    """PoseNet rotation of ``T_{last->ref}``."""
    frames = np.asarray(frames, dtype=np.float64)
    n = len(frames)
    if model.pose_config is None or n != model.pose_config.num_frames:
        raise EvaluationError(f"PoseNet expects {getattr(model.pose_config, 'num_frames', '?')} frames, got {n}")
    ref_index = n - 2 if ref_index is None else ref_index
    H, W = frames.shape[-2:]
    with T.no_grad():
        poses, _ = posenet_forward(Tensor(frames.reshape(3 * n, H, W)), model.pose, model.pose_config)
    return poses[ref_index].R.copy()


# -- dataset evaluation ------------------------------------------------------

Predictor = Callable[[Sequence, int, int], np.ndarray]


def _test_pairs(seq: Sequence) -> list[tuple[int, int]]:
    k = len(seq) - 1
    return [(k - 1, k)] if k >= 1 else []


def _evaluate_predictor(
    predict: Predictor,
    sequences: list[Sequence],
    mode: ScaleMode,
    d0: float,
    flip: bool,
    cap,
    name: str,
    vis_dir: str | Path | None = None,
) -> EvalReport:
    report = EvalReport(mode.tag, flip_vertical=flip, predictor=name)
    for seq in sequences:
        if flip:
            seq = flip_vertical(seq)
        if seq.depths is None:
            raise DatasetError(f"{seq.name}: evaluation needs ground-truth depth")
        for r, t in _test_pairs(seq):
            displacement = seq.displacement(t) if mode.tag == "P" else None
            raw = predict(seq, r, t)
            gt = seq.depths[t].astype(np.float64)
            mask = gt_mask(gt, cap)
            if not mask.any():
                log.warning("%s frame %d has no valid ground truth; skipped", seq.name, t)
                continue
            scale = mode.factor(raw, gt, mask, displacement, d0)
            pred = raw * scale
            report.frames.append(FrameResult(seq.name, t, eigen_metrics(pred, gt, mask, cap), int(mask.sum()), scale))
            if vis_dir is not None:
                write_depth_visualization(Path(vis_dir) / f"{seq.name}_{t:02d}", pred, cap)
    return report


def _gt_rotation(seq: Sequence, r: int, t: int) -> np.ndarray:
    if seq.poses is None:
        raise DatasetError(f"{seq.name}: no poses available for stabilization")
    return relative_pose(seq.poses[t], seq.poses[r]).R


def evaluate(
    model: Model | str | Path,
    sequences: list[Sequence],
    scale_mode: ScaleMode | str = "P",
    flip_vertical: bool = False,
    cap=DEFAULT_CAP,
    rotation_source: str = "gt",
    vis_dir: str | Path | None = None,
) -> EvalReport:
    """Score ``model`` on the last pair of every sequence.

    ``rotation_source`` is ``"gt"`` (known rotation, as from an inertial
    sensor) or ``"posenet"``.  Pixels are scored in the frame of the target.
    """
    if not isinstance(model, Model):
        model = Model.load(model)
    mode = scale_mode if isinstance(scale_mode, ScaleMode) else ScaleMode(scale_mode)
    if rotation_source not in ("gt", "posenet"):
        raise EvaluationError(f"rotation_source must be 'gt' or 'posenet', got {rotation_source!r}")

    def predict(seq: Sequence, r: int, t: int) -> np.ndarray:
        rot = frames = ref_index = None
        if rotation_source == "gt":
            rot = _gt_rotation(seq, r, t)
        else:
            start = t + 1 - model.pose_config.num_frames
            if start < 0:
                raise EvaluationError(f"{seq.name}: too few frames for PoseNet")
            frames, ref_index = seq.images[start : t + 1], r - start
        # displacement = d0 keeps the raw output; scaling happens per mode
        return infer_pair(seq.images[r], seq.images[t], seq.intrinsics, model, model.d0, rot, frames, ref_index)

    return _evaluate_predictor(predict, sequences, mode, model.d0, flip_vertical, cap, "model", vis_dir)


def constant_plane_baseline(
    sequences: list[Sequence],
    scale_mode: ScaleMode | str = "GT",
    flip_vertical: bool = False,
    cap=DEFAULT_CAP,
    value: float = 1.0,
    d0: float = 1.0,
) -> EvalReport:
    """Same protocol as :func:`evaluate` for a predictor that outputs one constant depth."""
    mode = scale_mode if isinstance(scale_mode, ScaleMode) else ScaleMode(scale_mode)

    def predict(seq: Sequence, r: int, t: int) -> np.ndarray:
        return np.full(seq.images.shape[-2:], float(value))

    return _evaluate_predictor(predict, sequences, mode, d0, flip_vertical, cap, "constant_plane")


def oracle_predictor_report(sequences: list[Sequence], scale_mode: ScaleMode | str = "GT", d0: float = 1.0, cap=DEFAULT_CAP) -> EvalReport:
    """Ground truth fed back as the raw prediction (expressed for displacement ``d0``)."""
    mode = scale_mode if isinstance(scale_mode, ScaleMode) else ScaleMode(scale_mode)

    def predict(seq: Sequence, r: int, t: int) -> np.ndarray:
        gt = np.where(np.isfinite(seq.depths[t]), seq.depths[t], cap[1]).astype(np.float64)
        return gt * (d0 / seq.displacement(t)) if mode.tag == "P" else gt

    return _evaluate_predictor(predict, sequences, mode, d0, False, cap, "ground_truth")


def rigid_consistency(seq: Sequence, src: int, target: int) -> float:
    """Masked mean |I_hat - I_target| when frame ``src`` is warped with ground-truth depth and pose.

    Sky pixels are warped at the sentinel distance, i.e. by rotation only.
    """
    if seq.depths is None or seq.poses is None:
        raise DatasetError(f"{seq.name}: rigid consistency needs ground-truth depth and poses")
    depth = np.where(np.isfinite(seq.depths[target]), seq.depths[target], SKY_SENTINEL)
    pose = relative_pose(seq.poses[target], seq.poses[src])
    with T.no_grad():
        warped = inverse_warp(seq.images[src], depth, pose, seq.intrinsics)
    if warped.mask.sum() == 0:
        raise EvaluationError(f"{seq.name}: frames {src} and {target} do not overlap")
    return photometric_l1([warped], seq.images[target])


def scene_consistency(seq: Sequence) -> float:
    """Average rigid-consistency error over adjacent pairs, both directions."""
    errs = [rigid_consistency(seq, a, b) for k in range(1, len(seq)) for a, b in ((k - 1, k), (k, k - 1))]
    return float(np.mean(errs))


# -- visualization -----------------------------------------------------------

def inverse_depth_colormap(depth: np.ndarray, cap=DEFAULT_CAP) -> np.ndarray:
    """RGB [3, H, W] in [0, 1]; near is bright yellow, far is dark purple."""
    inv = 1.0 / np.clip(np.nan_to_num(depth, posinf=cap[1]), cap[0], cap[1])
    lo, hi = inv.min(), inv.max()
    x = (inv - lo) / (hi - lo) if hi > lo else np.zeros_like(inv)
    stops = np.array([[0.0, 0.0, 0.02], [0.35, 0.05, 0.5], [0.85, 0.25, 0.35], [0.99, 0.6, 0.1], [0.99, 0.99, 0.65]])
    pos = x * (len(stops) - 1)
    i = np.minimum(pos.astype(int), len(stops) - 2)
    frac = (pos - i)[..., None]
    rgb = stops[i] * (1 - frac) + stops[i + 1] * frac
    return rgb.transpose(2, 0, 1)


def write_depth_visualization(stem: str | Path, depth: np.ndarray, cap=DEFAULT_CAP) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    write_pfm(stem.with_suffix(".pfm"), depth.astype(np.float32))
    write_ppm(stem.with_suffix(".ppm"), inverse_depth_colormap(depth, cap))
