"""Small DepthNet / PoseNet on top of the tape engine, plus the checkpoint format.

Checkpoint layout (little-endian)::

    b"MDNC"  u32 version
    repeated, sorted by name:
        u32 name_length, name (utf-8), u32 rank, u64 extents[rank], f64 payload
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tape as T
from .geometry import Pose, euler_to_matrix
from .tape import Tensor, as_tensor

DEPTH_EPS = 0.01
POSE_OUTPUT_SCALE = 0.01
HIDDEN_SLOPE = 0.1  # leaky ReLU in every hidden layer

Params = dict[str, Tensor]


@dataclass(frozen=True)
class DepthNetConfig:
    base_channels: int = 8
    num_levels: int = 5
    num_output_scales: int = 4

    def __post_init__(self):
        if not 1 <= self.num_output_scales <= self.num_levels:
            raise ValueError("num_output_scales must be in [1, num_levels]")

    def channels(self, level: int) -> int:
        if level == 0:
            return self.base_channels
        return self.base_channels * 2 ** min(level - 1, 3)


@dataclass(frozen=True)
class PoseNetConfig:
    base_channels: int = 8
    num_frames: int = 5
    num_stride2: int = 5

    def __post_init__(self):
        if self.num_frames < 2:
            raise ValueError("PoseNet needs at least two frames")

    def channels(self, layer: int) -> int:
        return self.base_channels * 2 ** min(layer, 3)


# -- parameter construction --------------------------------------------------

def _conv_param(rng: np.random.Generator, fan_out: int, fan_in: int, k: int, zero: bool = False):
    shape = (fan_out, fan_in, k, k)
    if zero:
        w = np.zeros(shape)
    else:
        bound = np.sqrt(6.0 / (fan_in * k * k))
        w = rng.uniform(-bound, bound, size=shape)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)


def _depth_layout(cfg: DepthNetConfig) -> list[tuple[str, int, int, bool]]:
    """(name, in_channels, out_channels, zero_init) for every 3x3 conv."""
    c = cfg.channels
    layers = [("enc0", 6, c(0), False)]
    for lv in range(1, cfg.num_levels + 1):
        layers.append((f"enc{lv}a", c(lv - 1), c(lv), False))
        layers.append((f"enc{lv}b", c(lv), c(lv), False))
    for lv in range(cfg.num_levels, 0, -1):
        layers.append((f"up{lv}", c(lv), c(lv - 1), False))
        layers.append((f"dec{lv - 1}", 2 * c(lv - 1), c(lv - 1), False))
        if lv - 1 < cfg.num_output_scales:
            layers.append((f"head{lv - 1}", c(lv - 1), 1, True))
    return layers


def _pose_layout(cfg: PoseNetConfig) -> list[tuple[str, int, int, int, bool]]:
    layers = []
    cin = 3 * cfg.num_frames
    for i in range(cfg.num_stride2):
        layers.append((f"conv{i}", cin, cfg.channels(i), 3, False))
        cin = cfg.channels(i)
    layers.append(("pred", cin, 6 * (cfg.num_frames - 1), 1, True))
    return layers


def init_params(config: DepthNetConfig | PoseNetConfig, seed: int) -> Params:
    """Deterministic He-uniform conv weights, zero biases, zero prediction layers."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    if isinstance(config, DepthNetConfig):
        for name, cin, cout, zero in _depth_layout(config):
            params[f"{name}.weight"], params[f"{name}.bias"] = _conv_param(rng, cout, cin, 3, zero)
    elif isinstance(config, PoseNetConfig):
        for name, cin, cout, k, zero in _pose_layout(config):
            params[f"{name}.weight"], params[f"{name}.bias"] = _conv_param(rng, cout, cin, k, zero)
    else:
        raise TypeError(f"unknown network config {type(config).__name__}")
    return params


def count_params(params: Mapping[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


# -- forward passes ----------------------------------------------------------

def _conv(params: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = params[f"{name}.weight"]
    return T.conv2d(x, w, params[f"{name}.bias"], stride=stride, padding=w.shape[-1] // 2)


def _act(x: Tensor) -> Tensor:
    return T.leaky_relu(x, HIDDEN_SLOPE)


def depth_activation(x: Tensor) -> Tensor:
    return T.elu(x) + (1.0 + DEPTH_EPS)


def depthnet_forward(ref_stab, target, params: Params, config: DepthNetConfig = DepthNetConfig()) -> list[Tensor]:
    """Depth maps ``zeta^s`` [H/2^s, W/2^s] for s = 0 .. num_output_scales-1.

    The input is the stabilized reference stacked on top of the target frame.
    Every level of the encoder halves the resolution; the decoder mirrors it
    with nearest upsampling, a 3x3 conv and a skip connection.
    """
    ref_stab, target = as_tensor(ref_stab), as_tensor(target)
    if ref_stab.shape != target.shape or ref_stab.shape[0] != 3:
        raise ValueError(f"depthnet expects two [3,H,W] frames, got {ref_stab.shape} and {target.shape}")
    H, W = target.shape[1:]
    div = 2**config.num_levels
    if H % div or W % div:
        raise ValueError(f"depthnet input {H}x{W} must be divisible by {div}")

    x = _act(_conv(params, "enc0", T.concat([ref_stab, target], axis=0)))
    skips = [x]
    for lv in range(1, config.num_levels + 1):
        x = _act(_conv(params, f"enc{lv}a", x, stride=2))
        x = _act(_conv(params, f"enc{lv}b", x))
        skips.append(x)
    outputs: dict[int, Tensor] = {}
    for lv in range(config.num_levels, 0, -1):
        x = _act(_conv(params, f"up{lv}", T.upsample2x(x)))
        x = _act(_conv(params, f"dec{lv - 1}", T.concat([x, skips[lv - 1]], axis=0)))
        if lv - 1 < config.num_output_scales:
            outputs[lv - 1] = depth_activation(_conv(params, f"head{lv - 1}", x))[0]
    return [outputs[s] for s in range(config.num_output_scales)]


def posenet_raw(frames, params: Params, config: PoseNetConfig = PoseNetConfig()) -> Tensor:
    """Scaled network output, shape [N-1, 6] as (angles, translation) per frame."""
    frames = as_tensor(frames)
    if frames.shape[0] != 3 * config.num_frames:
        raise ValueError(f"posenet expects {3 * config.num_frames} channels, got {frames.shape[0]}")
    floor = 2**config.num_stride2
    if min(frames.shape[1:]) < floor:
        raise ValueError(f"posenet: input {frames.shape[1]}x{frames.shape[2]} collapses below one cell; need >= {floor}")
    x = frames
    for i in range(config.num_stride2):
        x = _act(_conv(params, f"conv{i}", x, stride=2))
    x = _conv(params, "pred", x)
    pooled = T.mean(x, axis=(1, 2))
    return (pooled * POSE_OUTPUT_SCALE).reshape(config.num_frames - 1, 6)


def posenet_forward(
    frames,
    params: Params,
    config: PoseNetConfig = PoseNetConfig(),
    gt_rotations: Sequence[np.ndarray] | None = None,
) -> tuple[list[Pose], Tensor]:
    """Poses ``T_{last->i}`` for the first N-1 frames and the raw output.

    With ``gt_rotations`` (orientation supervision) the rotations are the
    given matrices, untouched; only translations come from the network.
    """
    raw = posenet_raw(frames, params, config)
    poses = []
    for i in range(config.num_frames - 1):
        t = raw[i, 3:]
        if gt_rotations is not None:
            R = Tensor(gt_rotations[i])
        else:
            R = euler_to_matrix(raw[i, :3])
        poses.append(Pose(R, t))
    return poses, raw


# -- checkpoints -------------------------------------------------------------

MAGIC = b"MDNC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(params):
        value = params[name]
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r} at offset 0")
    if len(buf) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 4")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            start = pos
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"{path}: payload of '{name}' truncated at offset {start}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed record at offset {pos}: {exc}") from None
    return out


def as_params(arrays: Mapping[str, np.ndarray], prefix: str = "") -> Params:
    """Fresh trainable leaves from arrays, optionally selecting a name prefix."""
    return {
        name[len(prefix) :]: Tensor(arr, requires_grad=True)
        for name, arr in arrays.items()
        if name.startswith(prefix)
    }


def config_to_dict(config: DepthNetConfig | PoseNetConfig) -> dict:
    return asdict(config)
