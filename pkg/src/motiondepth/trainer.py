"""Training loop: pose estimation and compensation, stabilization, depth, translation
normalization, multi-frame inverse warping, multi-scale loss and Adam."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tape as T
from .geometry import Intrinsics, NominalDisplacement, Pose, compensate_to_target, normalize_translations
from .losses import LossWeights, photometric_l1, photometric_loss, smooth_loss, total_loss
from .networks import (
    DepthNetConfig,
    Params,
    PoseNetConfig,
    CheckpointError,
    as_params,
    depthnet_forward,
    init_params,
    load_checkpoint,
    posenet_forward,
    save_checkpoint,
)
from .stillbox import Sequence, relative_pose
from .tape import Tensor
from .warp import inverse_warp, stabilize

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.075
    lam: float = 3.0
    d0: float = 1.0
    epsilon: float | None = None
    seq_len: int = 5
    batch_size: int = 4
    iterations: int = 2000
    seed: int = 0
    supervision: str = "none"  # "none" | "orientation"
    pose_reg: float = 1e-4
    num_scales: int = 4
    base_channels: int = 8
    num_levels: int = 5
    pose_stride2: int = 5
    hflip: bool = False
    depth_warmup: int = 0  # iterations during which DepthNet weights stay frozen
    checkpoint_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        if self.supervision not in ("none", "orientation"):
            raise ConfigError(f"supervision must be 'none' or 'orientation', got {self.supervision!r}")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 1 and iterations >= 0")
        if self.depth_warmup < 0:
            raise ConfigError("depth_warmup must be >= 0")

    @property
    def nominal(self) -> NominalDisplacement:
        return NominalDisplacement(self.d0, self.epsilon)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.lam, self.num_scales)

    @property
    def depth_config(self) -> DepthNetConfig:
        return DepthNetConfig(self.base_channels, self.num_levels, self.num_scales)

    @property
    def pose_config(self) -> PoseNetConfig:
        return PoseNetConfig(self.base_channels, self.seq_len, self.pose_stride2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        path = Path(path)
        text = path.read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: line 1: top level must be an object")
        try:
            return cls.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


@dataclass
class Model:
    depth_config: DepthNetConfig
    pose_config: PoseNetConfig | None
    depth: Params
    pose: Params
    d0: float = 1.0  # nominal displacement the depth output refers to

    @classmethod
    def initialize(cls, config: TrainConfig) -> "Model":
        ss = np.random.SeedSequence(config.seed).spawn(2)
        dcfg, pcfg = config.depth_config, config.pose_config
        depth = init_params(dcfg, int(ss[0].generate_state(1)[0]))
        pose = init_params(pcfg, int(ss[1].generate_state(1)[0]))
        return cls(dcfg, pcfg, depth, pose, config.d0)

    def named_params(self) -> dict[str, Tensor]:
        out = {f"depth.{k}": v for k, v in self.depth.items()}
        out.update({f"pose.{k}": v for k, v in self.pose.items()})
        return out

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.zero_grad()

    def save(self, path: str | Path) -> None:
        arrays: dict = dict(self.named_params())
        arrays["meta.d0"] = np.array(self.d0)
        save_checkpoint(path, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        """Read a model checkpoint; network shapes are recovered from the tensors."""
        arrays = load_checkpoint(path)
        depth = as_params(arrays, "depth.")
        pose = as_params(arrays, "pose.")
        if not depth or "enc0.weight" not in depth:
            raise CheckpointError(f"{path}: no DepthNet parameters found")
        d0 = float(arrays["meta.d0"]) if "meta.d0" in arrays else 1.0
        pose_cfg = _infer_pose_config(pose) if pose else None
        return cls(_infer_depth_config(depth), pose_cfg, depth, pose, d0)


def _infer_depth_config(p: Params) -> DepthNetConfig:
    levels = sum(1 for k in p if k.startswith("enc") and k.endswith("a.weight"))
    heads = sum(1 for k in p if k.startswith("head") and k.endswith(".weight"))
    return DepthNetConfig(p["enc0.weight"].shape[0], levels, heads)


def _infer_pose_config(p: Params) -> PoseNetConfig:
    convs = sum(1 for k in p if k.startswith("conv") and k.endswith(".weight"))
    frames = p["pred.weight"].shape[0] // 6 + 1
    return PoseNetConfig(p["conv0.weight"].shape[0], frames, convs)


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def save(self, path: str | Path) -> None:
        arrays = {f"m.{k}": a for k, a in self.m.items()}
        arrays.update({f"v.{k}": a for k, a in self.v.items()})
        arrays["step"] = np.array(float(self.step))
        save_checkpoint(path, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "AdamState":
        arrays = load_checkpoint(path)
        m = {k[2:]: a for k, a in arrays.items() if k.startswith("m.")}
        v = {k[2:]: a for k, a in arrays.items() if k.startswith("v.")}
        return cls(m, v, int(arrays["step"]))


def adam_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam step; returns new arrays and advances ``state``."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_update: gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


# -- sampling ----------------------------------------------------------------

@dataclass
class Subsequence:
    frames: np.ndarray  # [N, 3, H, W]
    t: int
    r: int
    intrinsics: Intrinsics
    gt_rotations: list[np.ndarray] | None = None  # rotation of T_{last->i}, i < N-1
    start: int = 0


def sample_subsequence(seq: Sequence, n: int, rng: np.random.Generator) -> Subsequence | None:
    """Uniform contiguous window of ``n`` frames with distinct random target/reference."""
    if len(seq) < n:
        log.warning("sequence %s has %d frames, fewer than %d; skipped", seq.name, len(seq), n)
        return None
    start = int(rng.integers(0, len(seq) - n + 1))
    t = int(rng.integers(0, n))
    r = int(rng.integers(0, n - 1))
    if r >= t:
        r += 1
    gt = None
    if seq.poses is not None:
        last = seq.poses[start + n - 1]
        gt = [relative_pose(last, seq.poses[start + i]).R for i in range(n - 1)]
    return Subsequence(seq.images[start : start + n], t, r, seq.intrinsics, gt, start)


def hflip_subsequence(sub: Subsequence) -> Subsequence:
    W = sub.frames.shape[-1]
    F = np.diag([-1.0, 1.0, 1.0])
    K = sub.intrinsics
    rots = None if sub.gt_rotations is None else [F @ R @ F for R in sub.gt_rotations]
    return Subsequence(sub.frames[..., ::-1].copy(), sub.t, sub.r, Intrinsics(K.fx, K.fy, W - 1 - K.cx, K.cy), rots, sub.start)


def image_pyramid(images: np.ndarray, levels: int) -> list[np.ndarray]:
    """``images`` [..., H, W] average-pooled 0..levels-1 times."""
    out = [images]
    for _ in range(levels - 1):
        x = out[-1]
        H, W = x.shape[-2:]
        out.append(x.reshape(x.shape[:-2] + (H // 2, 2, W // 2, 2)).mean(axis=(-3, -1)))
    return out


# -- one step --------------------------------------------------------------

@dataclass
class StepResult:
    total: Tensor
    photometric: float
    smoothness: float
    photo_l1: float
    poses: list[Pose]
    zetas: list[Tensor]


def forward_loss(sub: Subsequence, model: Model, config: TrainConfig) -> StepResult:
    """Build the full objective for one subsequence on the active tape."""
    n = len(sub.frames)
    t, r = sub.t, sub.r
    K = sub.intrinsics
    H, W = sub.frames.shape[-2:]
    frames_in = Tensor(sub.frames.reshape(3 * n, H, W))
    gt = sub.gt_rotations if config.supervision == "orientation" else None
    if config.supervision == "orientation" and gt is None:
        raise TrainingError("orientation supervision needs ground-truth poses")
    poses_to_last, raw = posenet_forward(frames_in, model.pose, model.pose_config, gt_rotations=gt)
    poses_to_last = poses_to_last + [Pose.identity()]

    poses = compensate_to_target(poses_to_last, t)
    assert np.allclose(poses[t].R, np.eye(3), atol=1e-9) and np.allclose(poses[t].t, 0, atol=1e-9)

    stab = stabilize(sub.frames[r], poses[r].rotation, K)
    zetas = depthnet_forward(stab.image, sub.frames[t], model.depth, model.depth_config)

    nd = config.nominal
    norm = normalize_translations(poses, r, nd)
    tr = float(np.linalg.norm(poses[r].t))
    if tr >= 1e3 * nd.epsilon:
        tn = float(np.linalg.norm(norm[r].t))
        assert nd.d0 * (1 - 1e-3) <= tn <= nd.d0 * (1 + 1e-12), tn

    pyr = image_pyramid(sub.frames, config.num_scales)
    per_scale = []
    lp_sum = lg_sum = 0.0
    l1 = float("nan")
    for s in range(config.num_scales):
        Ks = K.downscaled(s)
        target = pyr[s][t]
        warps = [inverse_warp(pyr[s][i], zetas[s], norm[i], Ks) for i in range(n) if i != t]
        lp = photometric_loss(warps, target, config.alpha)
        lg = smooth_loss(zetas[s], target)
        per_scale.append((lp, lg))
        lp_sum += 0.5**s * lp.item()
        lg_sum += 0.5**s * lg.item()
        if s == 0:
            l1 = photometric_l1(warps, target)
    total = total_loss(per_scale, config.weights)
    if config.pose_reg:
        total = total + config.pose_reg * T.sum(raw * raw)
    return StepResult(total, lp_sum, lg_sum, l1, norm, zetas)


def train_step(
    batch: list[Subsequence],
    model: Model,
    opt_state: AdamState,
    config: TrainConfig,
    iteration: int = 0,
) -> dict[str, float]:
    """Accumulate gradients over ``batch`` (fixed order), then one Adam update."""
    model.zero_grad()
    stats = {"L_p": 0.0, "L_g": 0.0, "total": 0.0, "photo_l1": 0.0}
    for sub in batch:
        T.current_tape().clear()
        res = forward_loss(sub, model, config)
        value = res.total.item()
        if not math.isfinite(value):
            T.current_tape().clear()
            raise TrainingError(f"non-finite loss {value} at iteration {iteration} (seed {config.seed})")
        T.backward(res.total * (1.0 / len(batch)))
        stats["L_p"] += res.photometric / len(batch)
        stats["L_g"] += res.smoothness / len(batch)
        stats["total"] += value / len(batch)
        stats["photo_l1"] += res.photo_l1 / len(batch)
    named = model.named_params()
    new = adam_update(
        {k: p.data for k, p in named.items()},
        {k: p.grad for k, p in named.items()},
        opt_state,
        config.lr,
        config.beta1,
        config.beta2,
        config.adam_eps,
    )
    # Adam moments keep accumulating for frozen weights
    frozen = iteration < config.depth_warmup
    for k, p in named.items():
        if not (frozen and k.startswith("depth.")):
            p.data = new[k]
    return stats


# -- full loop -----------------------------------------------------------------

LOG_FIELDS = ["iteration", "L_p", "L_g", "total", "photo_l1"]


def _draw_batch(sequences: list[Sequence], config: TrainConfig, rng: np.random.Generator) -> list[Subsequence]:
    batch: list[Subsequence] = []
    tries = 0
    while len(batch) < config.batch_size:
        tries += 1
        if tries > 100 * config.batch_size:
            raise TrainingError("no sequence is long enough for the configured seq_len")
        seq = sequences[int(rng.integers(len(sequences)))]
        sub = sample_subsequence(seq, config.seq_len, rng)
        if sub is None:
            continue
        if config.hflip and rng.random() < 0.5:
            sub = hflip_subsequence(sub)
        batch.append(sub)
    return batch


def train(
    sequences: list[Sequence],
    config: TrainConfig,
    out_dir: str | Path,
    resume: bool = False,
    progress=None,
) -> Model:
    """Run ``config.iterations`` steps; writes checkpoints and ``loss_log.csv`` to ``out_dir``."""
    if not sequences:
        raise TrainingError("training set is empty")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TrainingError(f"cannot create output directory {out}: {exc}") from None
    model_path, adam_path, rng_path = out / "model.ckpt", out / "adam.ckpt", out / "rng_state.json"
    log_path = out / "loss_log.csv"

    if resume and model_path.exists():
        model = Model.load(model_path)
        opt = AdamState.load(adam_path)
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(rng_path.read_text())
        start = opt.step
        # rows logged after the last checkpoint will be recomputed
        kept = [row for row in read_loss_log(log_path) if row["iteration"] < start] if log_path.exists() else []
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_FIELDS)
            writer.writerows([[int(row["iteration"])] + [repr(row[k]) for k in LOG_FIELDS[1:]] for row in kept])
        log.info("resuming from %s at iteration %d", model_path, start)
    else:
        model = Model.initialize(config)
        opt = AdamState()
        rng = np.random.default_rng(config.seed)
        start = 0
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_FIELDS)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    if config.supervision == "orientation":
        log.info("orientation supervision: ground-truth rotations feed compensation and stabilization")

    def _checkpoint():
        model.save(model_path)
        opt.save(adam_path)
        rng_path.write_text(json.dumps(rng.bit_generator.state))

    with open(log_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        for it in range(start, config.iterations):
            batch = _draw_batch(sequences, config, rng)
            stats = train_step(batch, model, opt, config, it)
            writer.writerow([it] + [repr(stats[k]) for k in LOG_FIELDS[1:]])
            if config.log_every and (it % config.log_every == 0 or it == config.iterations - 1):
                fh.flush()
                log.info("iter %d  L_p %.4f  L_g %.4f  total %.4f  l1 %.4f", it, stats["L_p"], stats["L_g"], stats["total"], stats["photo_l1"])
            if progress is not None:
                progress(it, stats)
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                fh.flush()
                _checkpoint()
    _checkpoint()
    return model


def read_loss_log(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
