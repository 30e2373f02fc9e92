"""Central finite-difference verification of every differentiable operation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tape as T
from .geometry import Intrinsics, NominalDisplacement, Pose, euler_to_matrix, normalize_translations
from .losses import LossWeights, photometric_loss, smooth_loss, ssim, total_loss
from .tape import Tensor
from .warp import bilinear_sample, inverse_warp, stabilize

OP_TOLERANCE = 1e-4
PIPELINE_TOLERANCE = 1e-3
STEP = 1e-6

Builder = Callable[[np.random.Generator, int], tuple[Callable[..., Tensor], list[np.ndarray]]]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    probes: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` with the floor at 1e-3 of the largest gradient seen.

    The floor keeps round-off on near-zero entries from dominating.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    floor = max(1e-3 * float(np.max(np.abs(a))) if a.size else 0.0, 1e-10)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_function(
    fn: Callable[..., Tensor],
    inputs: list[np.ndarray],
    probes: int = 100,
    seed: int = 0,
    step: float = STEP,
) -> tuple[float, int]:
    """Compare tape gradients of ``sum(w * fn(*inputs))`` with central differences.

    ``w`` is a fixed random weighting so every output cell matters.  Returns
    the max relative error over ``probes`` randomly chosen input entries.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    with T.fresh_tape():
        leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
        out = fn(*leaves)
        weights = rng.uniform(0.5, 1.5, size=out.shape)
        T.backward(T.sum(out * weights))
        analytic = [leaf.grad.copy() for leaf in leaves]

    def value(arrays) -> float:
        with T.no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights))

    sizes = np.array([x.size for x in inputs], dtype=float)
    picks = rng.choice(len(inputs), size=probes, p=sizes / sizes.sum())
    num, ana = [], []
    for k in picks:
        idx = int(rng.integers(inputs[k].size))
        plus = [x.copy() for x in inputs]
        minus = [x.copy() for x in inputs]
        plus[k].flat[idx] += step
        minus[k].flat[idx] -= step
        num.append((value(plus) - value(minus)) / (2 * step))
        ana.append(analytic[k].flat[idx])
    # floor relative to the probed gradients of this op
    err = relative_error(np.array(ana), np.array(num))
    return float(np.max(err)), probes


# -- inputs ---------------------------------------------------------------------

def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _smooth_image(rng, channels: int, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size] / size
    img = np.zeros((channels, size, size))
    for c in range(channels):
        for _ in range(4):
            fx, fy, ph = rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
            img[c] += np.sin(2 * np.pi * (fx * x + fy * y) + ph)
    return 0.5 + 0.12 * img


def _coords_off_lattice(rng, shape, hi_u, hi_v):
    """Sample locations whose fractional parts stay clear of the bilinear kinks."""
    u = rng.integers(0, hi_u, size=shape) + rng.uniform(0.1, 0.9, size=shape)
    v = rng.integers(0, hi_v, size=shape) + rng.uniform(0.1, 0.9, size=shape)
    return np.stack([u, v])


def _warp_setup(rng, size):
    K = Intrinsics.centered(size, size)
    depth = rng.uniform(3.0, 6.0, size=(size, size))
    pose = Pose.from_euler(rng.uniform(-0.03, 0.03, 3), rng.uniform(-0.1, 0.1, 3))
    return K, depth, pose


def _op_builders() -> dict[str, Builder]:
    def unary(op, positive=False):
        def build(rng, size):
            x = rng.uniform(0.3, 2.0, (4, 5)) if positive else _away_from_zero(rng, (4, 5))
            return op, [x]

        return build

    def binary(op, positive_b=False):
        def build(rng, size):
            a = _away_from_zero(rng, (4, 5))
            b = rng.uniform(0.3, 2.0, (1, 5)) if positive_b else _away_from_zero(rng, (1, 5))
            return op, [a, b]

        return build

    def conv(stride):
        def build(rng, size):
            x = rng.normal(size=(3, size, size))
            w = rng.normal(size=(4, 3, 3, 3))
            b = rng.normal(size=4)
            return (lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=1)), [x, w, b]

        return build

    def bilinear(rng, size):
        src = rng.uniform(0, 1, (3, size, size))
        coords = _coords_off_lattice(rng, (size // 2, size // 2), size - 1, size - 1)
        return (lambda s, c: bilinear_sample(s, c).image), [src, coords]

    def warp(rng, size):
        K, depth, pose = _warp_setup(rng, size)
        src = _smooth_image(rng, 3, size)

        def fn(s, d, ang, t):
            return inverse_warp(s, d, Pose(euler_to_matrix(ang), t), K).image

        angles = np.array([0.02, -0.015, 0.01])
        return fn, [src, depth, angles, pose.t]

    def stab(rng, size):
        K = Intrinsics.centered(size, size)
        src = _smooth_image(rng, 3, size)
        return (lambda s, a: stabilize(s, euler_to_matrix(a), K).image), [src, rng.uniform(-0.04, 0.04, 3)]

    def ssim_build(rng, size):
        a = _smooth_image(rng, 3, size)
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        return (lambda x, y: ssim(x, y)), [a, b]

    def photo(rng, size):
        K, depth, pose = _warp_setup(rng, size)
        src = _smooth_image(rng, 3, size)
        target = _smooth_image(rng, 3, size)

        def fn(s, tgt, d):
            return photometric_loss([inverse_warp(s, d, pose, K)], tgt, alpha=0.075)

        return fn, [src, target, depth]

    def smooth(rng, size):
        zeta = rng.uniform(1.0, 3.0, (size, size))
        img = _smooth_image(rng, 3, size)
        return (lambda z: smooth_loss(z, img)), [zeta]

    def normalize(rng, size):
        nd = NominalDisplacement(1.0)

        def fn(t0, t1):
            poses = [Pose(np.eye(3), t0), Pose(np.eye(3), t1)]
            out = normalize_translations(poses, 1, nd)
            return T.concat([out[0].translation, out[1].translation])

        return fn, [rng.normal(size=3), rng.normal(size=3)]

    def scales(rng, size):
        w = LossWeights(num_scales=4)
        return (lambda v: total_loss([(v[i, 0], v[i, 1]) for i in range(4)], w)), [rng.uniform(0.1, 1, (4, 2))]

    return {
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "div": binary(T.div, positive_b=True),
        "maximum": binary(T.maximum),
        "neg": unary(T.neg),
        "abs": unary(T.abs),
        "pow": unary(lambda x: T.pow(x, 2.5), positive=True),
        "exp": unary(T.exp),
        "log": unary(T.log, positive=True),
        "sqrt": unary(T.sqrt, positive=True),
        "sin": unary(T.sin),
        "cos": unary(T.cos),
        "relu": unary(T.relu),
        "leaky_relu": unary(T.leaky_relu),
        "elu": unary(T.elu),
        "clamp_min": unary(lambda x: T.clamp_min(x, 0.1)),
        "sum": unary(lambda x: T.sum(x, axis=1)),
        "mean": unary(lambda x: T.mean(x, axis=0, keepdims=True)),
        "reshape": unary(lambda x: T.reshape(x, (5, 4)) * np.arange(20.0).reshape(5, 4)),
        "transpose": unary(lambda x: T.transpose(x) * np.arange(20.0).reshape(5, 4)),
        "getitem": unary(lambda x: x[np.array([0, 2, 2]), 1:4]),
        "concat": binary(lambda a, b: T.concat([a, b], axis=0)),
        "stack": unary(lambda x: T.stack([x, x * x], axis=1)),
        "matmul": lambda rng, size: (T.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "matvec": lambda rng, size: (T.matmul, [rng.normal(size=(3, 3)), rng.normal(size=3)]),
        "conv2d": conv(1),
        "conv2d_stride2": conv(2),
        "filter2d": lambda rng, size: ((lambda x: T.filter2d(x, rng_kernel)), [rng.normal(size=(2, size, size))]),
        "pad_reflect": lambda rng, size: ((lambda x: T.pad_reflect(x, 1) * ramp(size + 2)), [rng.normal(size=(2, size, size))]),
        "upsample2x": lambda rng, size: (T.upsample2x, [rng.normal(size=(2, size // 2, size // 2))]),
        "avg_pool2x": lambda rng, size: (T.downsample2x_avg, [rng.normal(size=(2, size, size))]),
        "euler_to_matrix": lambda rng, size: (euler_to_matrix, [rng.uniform(-1, 1, 3)]),
        "bilinear_sample": bilinear,
        "inverse_warp": warp,
        "stabilize": stab,
        "ssim": ssim_build,
        "photometric_loss": photo,
        "smooth_loss": smooth,
        "normalize_translations": normalize,
        "total_loss": scales,
    }


rng_kernel = np.array([[0.1, -0.3, 0.2], [0.5, 1.0, -0.7], [0.05, 0.4, -0.2]])


def ramp(n: int) -> np.ndarray:
    return np.arange(n * n, dtype=float).reshape(n, n) / (n * n)


OP_NAMES = list(_op_builders())


def pipeline_check(seed: int = 0, size: int = 16, probes: int = 100) -> CheckResult:
    """Full training objective (PoseNet, compensation, stabilization, DepthNet,
    normalization, warping, multi-scale loss) w.r.t. a random subset of weights."""
    from .networks import init_params
    from .trainer import Model, Subsequence, TrainConfig, forward_loss

    if size < 8 or size & (size - 1):
        raise ValueError("pipeline size must be a power of two >= 8")
    log2 = size.bit_length() - 1
    cfg = TrainConfig(base_channels=4, num_levels=min(5, log2), num_scales=min(4, log2 - 1), seq_len=3, pose_stride2=3, seed=seed, d0=0.05)  # small d0 keeps most warped pixels in view
    rng = np.random.default_rng(seed)
    depth = init_params(cfg.depth_config, seed)
    pose = init_params(cfg.pose_config, seed + 1)
    for name, p in list(depth.items()) + list(pose.items()):
        # the zero-initialized prediction layers would hide most of the graph
        if name.startswith(("head", "pred")):
            p.data = rng.normal(0, 0.5 if name.startswith("pred") else 0.1, p.shape)
    model = Model(cfg.depth_config, cfg.pose_config, depth, pose, cfg.d0)
    frames = np.stack([_smooth_image(rng, 3, size) for _ in range(cfg.seq_len)])
    sub = Subsequence(frames, t=2, r=0, intrinsics=Intrinsics.centered(size, size))
    arrays = [depth[n].data for n in sorted(depth)] + [pose[n].data for n in sorted(pose)]

    def fn(*tensors):
        model.depth = dict(zip(sorted(depth), tensors[: len(depth)]))
        model.pose = dict(zip(sorted(pose), tensors[len(depth) :]))
        return forward_loss(sub, model, cfg).total

    err, n = check_function(fn, arrays, probes=probes, seed=seed)
    return CheckResult("pipeline", err, n, PIPELINE_TOLERANCE)


def run_gradcheck(seed: int = 0, size: int = 8, probes: int = 100, ops: list[str] | None = None, pipeline: bool = True) -> list[CheckResult]:
    builders = _op_builders()
    results = []
    for i, name in enumerate(ops or OP_NAMES):
        rng = np.random.default_rng([seed, i])
        fn, inputs = builders[name](rng, size)
        err, n = check_function(fn, inputs, probes=probes, seed=seed + i)
        results.append(CheckResult(name, err, n, OP_TOLERANCE))
    if pipeline:
        results.append(pipeline_check(seed, max(16, size), probes))
    return results


def format_results(results: list[CheckResult]) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{'op'.ljust(w)}  {'max rel err':>12}  {'tol':>7}  {'probes':>6}  status"]
    for r in results:
        lines.append(f"{r.name.ljust(w)}  {r.max_rel_error:12.3e}  {r.tolerance:7.0e}  {r.probes:6d}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
