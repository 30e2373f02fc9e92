"""Synthetic rigid scenes: textured spheres, boxes and a ground plane seen by a
camera moving with constant per-frame motion.

World coordinates use the camera convention of the first frame (x right,
y down, z forward), so "below the camera" means positive y.  Each frame's pose
is camera-to-world; the body-frame step ``(R_step, v)`` between consecutive
frames is the same for the whole scene.

On disk::

    root/index.json
    root/scene_NNNN/metadata.json
    root/scene_NNNN/frame_KK.ppm   (P6, 8 bit)
    root/scene_NNNN/frame_KK.pfm   (grayscale, little-endian, sky = 1e9)
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose, matrix_to_euler, rotation_matrix

SKY_SENTINEL = 1e9
LIGHT_DIR = np.array([-0.35, -1.0, -0.45]) / np.linalg.norm([-0.35, -1.0, -0.45])  # towards the light
AMBIENT = 0.35
SUPERSAMPLE = 2
HEADING_RANGE = (np.pi / 3, 2 * np.pi / 3)  # angle between travel direction and optical axis
SPEED_RANGE = (0.1, 0.2)  # units per frame


class DatasetError(ValueError):
    pass


@dataclass
class Texture:
    kind: str  # "checker" | "noise"
    frequency: float
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    seed: int = 0


@dataclass
class Primitive:
    kind: str  # "sphere" | "box" | "plane"
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # sphere: (r, r, r); box: half extents; plane: unused
    texture: Texture


@dataclass
class SceneSpec:
    seed: int
    primitives: list[Primitive]
    velocity: tuple[float, float, float]
    rotation_velocity: tuple[float, float, float]
    frames_per_scene: int = 20
    width: int = 64
    height: int = 64
    focal: float | None = None

    @property
    def num_primitives(self) -> int:
        return len(self.primitives)

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics.centered(self.width, self.height, self.focal)


@dataclass
class RenderedFrame:
    rgb: np.ndarray  # [3, H, W], multiples of 1/255
    depth: np.ndarray  # [H, W] camera z; +inf for sky
    pose: Pose  # camera-to-world


@dataclass
class Scene:
    spec: SceneSpec
    frames: list[RenderedFrame]


@dataclass
class Sequence:
    """A loaded scene: images in [0,1], optional ground truth."""

    name: str
    images: np.ndarray  # [N, 3, H, W]
    intrinsics: Intrinsics
    depths: np.ndarray | None = None  # [N, H, W], inf for sky
    poses: list[Pose] | None = None  # camera-to-world
    metadata: dict = field(default_factory=dict)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.images)

    def displacement(self, k: int) -> float:
        """Camera travel between frame k-1 and frame k, from metadata."""
        try:
            value = self.metadata["frames"][k]["displacement"]
        except (KeyError, IndexError, TypeError):
            value = None
        if value is None:
            raise DatasetError(f"{self.name}: no displacement recorded for frame {k}")
        return float(value)


def relative_pose(cam_to_world_from: Pose, cam_to_world_to: Pose) -> Pose:
    """``T_{from->to}`` between two camera-to-world poses."""
    return cam_to_world_to.inverse().compose(cam_to_world_from).detach()


# -- random scene construction ----------------------------------------------

def _random_color(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(c) for c in rng.uniform(0.05, 1.0, size=3))


def _random_texture(rng: np.random.Generator, allow_checker: bool = True) -> Texture:
    kind = "checker" if allow_checker and rng.random() < 0.4 else "noise"
    freq = rng.uniform(0.8, 2.0) if kind == "checker" else rng.uniform(1.0, 3.0)
    return Texture(kind, float(freq), _random_color(rng), _random_color(rng), int(rng.integers(2**31)))


def camera_path(velocity, rotation_velocity, frames: int) -> list[Pose]:
    """Camera-to-world poses under a constant body-frame step."""
    step_R = rotation_matrix(rotation_velocity)
    v = np.asarray(velocity, dtype=np.float64)
    R, p = np.eye(3), np.zeros(3)
    poses = []
    for _ in range(frames):
        poses.append(Pose(R.copy(), p.copy()))
        p = p + R @ v
        R = R @ step_R
    return poses


def _clearance_ok(prim: Primitive, positions: np.ndarray, margin: float) -> bool:
    c = np.asarray(prim.center)
    if prim.kind == "sphere":
        return bool(np.all(np.linalg.norm(positions - c, axis=1) > prim.size[0] + margin))
    if prim.kind == "box":
        outside = np.maximum(np.abs(positions - c) - np.asarray(prim.size), 0.0)
        return bool(np.all(np.linalg.norm(outside, axis=1) > margin))
    return bool(np.all(positions[:, 1] < prim.center[1] - margin))


def random_scene_spec(
    seed: int,
    width: int = 64,
    height: int = 64,
    frames: int = 20,
    num_primitives: int | None = None,
    speed_range: tuple[float, float] = SPEED_RANGE,
    rotation_speed: float = 0.01,
    depth_range: tuple[float, float] = (3.0, 16.0),
    ground_plane: bool = True,
    max_attempts: int = 1000,
    heading_range: tuple[float, float] = HEADING_RANGE,
) -> SceneSpec:
    """Draw a scene; placements that would contain the camera path are rejected.

    The travel direction is uniform on the band of the unit sphere whose angle
    to the optical axis lies in ``heading_range`` ((0, pi) gives any direction).
    """
    rng = np.random.default_rng(seed)
    cos_t = rng.uniform(np.cos(heading_range[1]), np.cos(heading_range[0]))
    phi = rng.uniform(0.0, 2 * np.pi)
    sin_t = np.sqrt(max(0.0, 1.0 - cos_t**2))
    direction = np.array([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t])
    velocity = direction * rng.uniform(*speed_range)
    rot_vel = rng.uniform(-rotation_speed, rotation_speed, size=3)
    positions = np.array([p.t for p in camera_path(velocity, rot_vel, frames)])
    n = int(rng.integers(12, 20)) if num_primitives is None else num_primitives

    prims: list[Primitive] = []
    if ground_plane:
        height_below = rng.uniform(1.5, 3.0)
        # grazing views of a checkerboard alias badly at desk resolutions
        plane = Primitive("plane", (0.0, float(height_below), 0.0), (0.0, 0.0, 0.0), _random_texture(rng, False))
        if _clearance_ok(plane, positions, 0.3):
            prims.append(plane)
    attempts = 0
    while len([p for p in prims if p.kind != "plane"]) < n:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(f"scene {seed}: could not place {n} primitives in {max_attempts} attempts")
        z = rng.uniform(*depth_range)
        x = rng.uniform(-0.9, 0.9) * z
        y = rng.uniform(-0.7, 0.7) * z
        kind = "sphere" if rng.random() < 0.5 else "box"
        if kind == "sphere":
            r = rng.uniform(0.4, max(0.25 * z, 0.4))
            size = (r, r, r)
        else:
            size = tuple(float(s) for s in rng.uniform(0.3, max(0.2 * z, 0.3), size=3))
        prim = Primitive(kind, (float(x), float(y), float(z)), size, _random_texture(rng))
        if _clearance_ok(prim, positions, 0.3):
            prims.append(prim)
    return SceneSpec(
        seed=seed,
        primitives=prims,
        velocity=tuple(float(v) for v in velocity),
        rotation_velocity=tuple(float(w) for w in rot_vel),
        frames_per_scene=frames,
        width=width,
        height=height,
    )


# -- raycasting ---------------------------------------------------------------

def _intersect(prim: Primitive, origin: np.ndarray, dirs: np.ndarray):
    """Ray parameter of the nearest hit (inf if none) and unit normals, for rays ``o + s d``."""
    n_rays = dirs.shape[0]
    c = np.asarray(prim.center)
    normals = np.zeros((n_rays, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        if prim.kind == "sphere":
            r = prim.size[0]
            oc = origin - c
            a = np.einsum("ij,ij->i", dirs, dirs)
            b = 2.0 * dirs @ oc
            cc = oc @ oc - r * r
            disc = b * b - 4 * a * cc
            s = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a)
            s = np.where((disc >= 0) & (s > 1e-9), s, np.inf)
            hit = np.isfinite(s)
            normals[hit] = (origin + s[hit, None] * dirs[hit] - c) / r
        elif prim.kind == "box":
            half = np.asarray(prim.size)
            t1 = (c - half - origin) / dirs
            t2 = (c + half - origin) / dirs
            lo, hi = np.minimum(t1, t2), np.maximum(t1, t2)
            lo = np.where(np.isnan(lo), -np.inf, lo)
            hi = np.where(np.isnan(hi), np.inf, hi)
            tmin, tmax = lo.max(axis=1), hi.min(axis=1)
            s = np.where((tmax >= tmin) & (tmin > 1e-9), tmin, np.inf)
            hit = np.isfinite(s)
            axis = lo.argmax(axis=1)
            sign = -np.sign(dirs[np.arange(n_rays), axis])
            normals[hit, axis[hit]] = sign[hit]
        else:
            s = (prim.center[1] - origin[1]) / dirs[:, 1]
            s = np.where(np.isfinite(s) & (s > 1e-9), s, np.inf)
            normals[:, 1] = -1.0
    return s, normals


def _lattice_noise(points: np.ndarray, seed: int, size: int = 16) -> np.ndarray:
    """Smooth value noise in [0,1] with period ``size`` along each axis."""
    table = np.random.default_rng(seed).random((size, size, size))
    base = np.floor(points)
    f = points - base
    f = f * f * (3 - 2 * f)
    i = base.astype(np.int64) % size
    j = (i + 1) % size
    out = np.zeros(len(points))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        ix = j[:, 0] if dx else i[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            iy = j[:, 1] if dy else i[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                iz = j[:, 2] if dz else i[:, 2]
                out += wx * wy * wz * table[ix, iy, iz]
    return out


def _texture_value(tex: Texture, local: np.ndarray) -> np.ndarray:
    p = local * tex.frequency
    if tex.kind == "checker":
        p = p + 0.25  # keep cell boundaries off faces through the primitive centre
        return (np.floor(p).astype(np.int64).sum(axis=1) % 2).astype(np.float64)
    return 0.65 * _lattice_noise(p, tex.seed) + 0.35 * _lattice_noise(2.3 * p + 7.1, tex.seed + 1)


def _sky_color(dirs_world: np.ndarray) -> np.ndarray:
    d = dirs_world / np.linalg.norm(dirs_world, axis=1, keepdims=True)
    up = np.clip(-d[:, 1], -1.0, 1.0)
    horizon = np.array([0.85, 0.88, 0.92])
    zenith = np.array([0.35, 0.55, 0.85])
    t = (0.5 * (up + 1.0))[:, None]
    return horizon * (1 - t) + zenith * t


def _cast(spec: SceneSpec, pose: Pose, pixels: np.ndarray):
    """Depth (camera z) and colour for camera-frame pixel coordinates [N, 2]."""
    K = spec.intrinsics
    dirs_cam = np.stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy, np.ones(len(pixels))], axis=1)
    dirs = dirs_cam @ pose.R.T  # unit z in camera frame, so ray parameter == z-depth
    origin = pose.t
    depth = np.full(len(pixels), np.inf)
    color = _sky_color(dirs)
    for prim in spec.primitives:
        s, normals = _intersect(prim, origin, dirs)
        closer = s < depth
        if not closer.any():
            continue
        depth[closer] = s[closer]
        hitp = origin + s[closer, None] * dirs[closer]
        local = hitp - np.asarray(prim.center)
        tv = _texture_value(prim.texture, local)[:, None]
        albedo = np.asarray(prim.texture.color_a) * (1 - tv) + np.asarray(prim.texture.color_b) * tv
        shade = AMBIENT + (1 - AMBIENT) * np.maximum(normals[closer] @ LIGHT_DIR, 0.0)
        color[closer] = albedo * shade[:, None]
    return depth, color


def render_frame(spec: SceneSpec, pose: Pose) -> RenderedFrame:
    H, W = spec.height, spec.width
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    depth, _ = _cast(spec, pose, np.stack([u.ravel(), v.ravel()], axis=1))
    ss = SUPERSAMPLE
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    acc = np.zeros((H * W, 3))
    for oy in offs:
        for ox in offs:
            _, col = _cast(spec, pose, np.stack([u.ravel() + ox, v.ravel() + oy], axis=1))
            acc += col
    rgb = np.clip(acc / (ss * ss), 0.0, 1.0)
    rgb8 = np.round(rgb * 255.0).astype(np.uint8).reshape(H, W, 3).transpose(2, 0, 1)
    depth = depth.reshape(H, W).astype(np.float32).astype(np.float64)
    return RenderedFrame(rgb8.astype(np.float64) / 255.0, depth, pose)


def generate_scene(spec: SceneSpec) -> list[RenderedFrame]:
    if not spec.primitives:
        raise ValueError("scene needs at least one primitive or a ground plane")
    poses = camera_path(spec.velocity, spec.rotation_velocity, spec.frames_per_scene)
    positions = np.array([p.t for p in poses])
    for prim in spec.primitives:
        if prim.kind != "plane" and not _clearance_ok(prim, positions, 0.0):
            raise ValueError(f"camera path enters a {prim.kind} at {prim.center}")
    return [render_frame(spec, pose) for pose in poses]


def generate_dataset(num_scenes: int, seed: int, **kwargs) -> list[Scene]:
    scenes = []
    for i in range(num_scenes):
        spec = random_scene_spec(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]), **kwargs)
        scenes.append(Scene(spec, generate_scene(spec)))
    return scenes


# -- image formats ----------------------------------------------------------

def write_ppm(path: Path, rgb: np.ndarray) -> None:
    """``rgb`` is [3,H,W] in [0,1]."""
    data = np.round(np.asarray(rgb).transpose(1, 2, 0) * 255.0).astype(np.uint8)
    H, W = data.shape[:2]
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + data.tobytes())


_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf: bytes, count: int, path: Path):
    pos, tokens = 0, []
    for _ in range(count):
        m = _HEADER_TOKEN.match(buf, pos)
        if not m:
            raise DatasetError(f"{path}: malformed header at offset {pos}")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos + 1  # single whitespace byte ends the header


def read_ppm(path: Path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    (magic, w, h, maxval), pos = _header_tokens(buf, 4, path)
    if magic != b"P6":
        raise DatasetError(f"{path}: expected P6 magic at offset 0, got {magic!r}")
    try:
        W, H, mv = int(w), int(h), int(maxval)
    except ValueError:
        raise DatasetError(f"{path}: non-integer header field before offset {pos}") from None
    if mv != 255:
        raise DatasetError(f"{path}: only 8-bit PPM supported (maxval {mv})")
    if len(buf) - pos != W * H * 3:
        raise DatasetError(f"{path}: expected {W * H * 3} pixel bytes at offset {pos}, found {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(H, W, 3)
    return data.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pfm(path: Path, depth: np.ndarray) -> None:
    """Grayscale little-endian PFM, rows stored bottom to top; inf -> sentinel."""
    d = np.where(np.isfinite(depth), depth, SKY_SENTINEL).astype("<f4")
    H, W = d.shape
    Path(path).write_bytes(f"Pf\n{W} {H}\n-1.0\n".encode("ascii") + np.flipud(d).tobytes())


def read_pfm(path: Path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    (magic, w, h, scale), pos = _header_tokens(buf, 4, path)
    if magic != b"Pf":
        raise DatasetError(f"{path}: expected grayscale 'Pf' magic at offset 0, got {magic!r}")
    try:
        W, H, sc = int(w), int(h), float(scale)
    except ValueError:
        raise DatasetError(f"{path}: malformed header before offset {pos}") from None
    dtype = "<f4" if sc < 0 else ">f4"
    if len(buf) - pos != W * H * 4:
        raise DatasetError(f"{path}: expected {W * H * 4} payload bytes at offset {pos}, found {len(buf) - pos}")
    d = np.flipud(np.frombuffer(buf, dtype=dtype, offset=pos).reshape(H, W)).astype(np.float64)
    return np.where(d >= SKY_SENTINEL, np.inf, d)


# -- dataset I/O ---------------------------------------------------------------

def _primitive_dict(p: Primitive) -> dict:
    t = p.texture
    return {
        "kind": p.kind,
        "center": list(p.center),
        "size": list(p.size),
        "texture": {"kind": t.kind, "frequency": t.frequency, "color_a": list(t.color_a), "color_b": list(t.color_b), "seed": t.seed},
    }


def scene_metadata(scene: Scene) -> dict:
    spec = scene.spec
    frames = []
    for k, fr in enumerate(scene.frames):
        entry = fr.pose.to_dict()
        entry["displacement"] = None if k == 0 else float(np.linalg.norm(fr.pose.t - scene.frames[k - 1].pose.t))
        frames.append(entry)
    return {
        "seed": spec.seed,
        "frames_per_scene": spec.frames_per_scene,
        "width": spec.width,
        "height": spec.height,
        "intrinsics": spec.intrinsics.to_dict(),
        "velocity": list(spec.velocity),
        "rotation_velocity": list(spec.rotation_velocity),
        "primitives": [_primitive_dict(p) for p in spec.primitives],
        "frames": frames,
    }


def write_dataset(scenes: list[Scene], root: str | Path, val_fraction: float = 0.25) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:04d}"
        d = root / name
        d.mkdir(exist_ok=True)
        for k, fr in enumerate(scene.frames):
            write_ppm(d / f"frame_{k:02d}.ppm", fr.rgb)
            write_pfm(d / f"frame_{k:02d}.pfm", fr.depth)
        (d / "metadata.json").write_text(json.dumps(scene_metadata(scene), indent=1))
        names.append(name)
    n_val = int(round(len(names) * val_fraction)) if len(names) > 1 else 0
    index = {"scenes": names, "train": names[: len(names) - n_val], "val": names[len(names) - n_val :]}
    (root / "index.json").write_text(json.dumps(index, indent=1))


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON at offset {exc.pos}: {exc.msg}") from None


def load_sequence(scene_dir: str | Path, split: str = "train") -> Sequence:
    scene_dir = Path(scene_dir)
    meta = _read_json(scene_dir / "metadata.json")
    n = int(meta["frames_per_scene"])
    images, depths = [], []
    for k in range(n):
        images.append(read_ppm(scene_dir / f"frame_{k:02d}.ppm"))
        pfm = scene_dir / f"frame_{k:02d}.pfm"
        depths.append(read_pfm(pfm) if pfm.exists() else None)
    has_depth = all(d is not None for d in depths)
    poses = [Pose.from_dict(f) for f in meta["frames"]] if "frames" in meta else None
    return Sequence(
        name=scene_dir.name,
        images=np.stack(images),
        intrinsics=Intrinsics.from_dict(meta["intrinsics"]),
        depths=np.stack(depths) if has_depth else None,
        poses=poses,
        metadata=meta,
        split=split,
    )


def load_dataset(root: str | Path, split: str | None = None) -> list[Sequence]:
    """Load every scene listed in ``index.json`` (optionally one split only)."""
    root = Path(root)
    index = _read_json(root / "index.json")
    val = set(index.get("val", []))
    out = []
    for name in index["scenes"]:
        s = "val" if name in val else "train"
        if split is None or split == s:
            out.append(load_sequence(root / name, s))
    return out


def flip_vertical(seq: Sequence) -> Sequence:
    """Upside-down copy: images and depth flipped, intrinsics and poses mirrored."""
    H = seq.images.shape[-2]
    F = np.diag([1.0, -1.0, 1.0])
    poses = None if seq.poses is None else [Pose(F @ p.R @ F, F @ p.t) for p in seq.poses]
    return Sequence(
        name=seq.name,
        images=seq.images[..., ::-1, :].copy(),
        intrinsics=seq.intrinsics.flipped_vertical(H),
        depths=None if seq.depths is None else seq.depths[..., ::-1, :].copy(),
        poses=poses,
        metadata=seq.metadata,
        split=seq.split,
    )
