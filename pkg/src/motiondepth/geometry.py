"""Pinhole intrinsics, rigid poses, reprojection and translation normalization.

Conventions used throughout the package:

* pixel ``(u, v)`` is (column, row) with the origin at the centre of the
  top-left cell;
* camera frame is x right, y down, z forward;
* a :class:`Pose` ``(R, t)`` is a point transform ``X -> R X + t``.  A pose
  named ``T_{a->b}`` maps coordinates expressed in camera ``a`` to camera ``b``.

Rotations are parametrized by X-Y-Z Euler angles, ``R = Rz(g) Ry(b) Rx(a)``.
Gimbal lock (``|b| = pi/2``) is outside the operating range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .tape import Tensor, TensorLike, as_tensor


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def centered(cls, width: int, height: int, focal: float | None = None) -> "Intrinsics":
        """Principal point at the image centre; default focal gives a 90 degree horizontal FOV."""
        f = width / 2.0 if focal is None else float(focal)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def downscaled(self, level: int) -> "Intrinsics":
        """Intrinsics of the image average-pooled ``level`` times by 2."""
        s = 2.0**level
        return Intrinsics(self.fx / s, self.fy / s, (self.cx + 0.5) / s - 0.5, (self.cy + 0.5) / s - 0.5)

    def flipped_vertical(self, height: int) -> "Intrinsics":
        return Intrinsics(self.fx, self.fy, self.cx, height - 1 - self.cy)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass(frozen=True)
class NominalDisplacement:
    """Reference translation magnitude ``d0`` and the normalization guard ``epsilon``."""

    d0: float = 1.0
    epsilon: float | None = None

    def __post_init__(self):
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", 1e-5 * self.d0)
        if self.d0 <= 0:
            raise ValueError(f"d0 must be positive, got {self.d0}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.epsilon > self.d0 * 1e-3:
            raise ValueError(f"epsilon={self.epsilon} must not exceed d0*1e-3={self.d0 * 1e-3}")


# -- rotations ---------------------------------------------------------------

def _axis_rotations(angles: np.ndarray):
    a, b, g = (float(x) for x in angles)
    ca, sa, cb, sb, cg, sg = math.cos(a), math.sin(a), math.cos(b), math.sin(b), math.cos(g), math.sin(g)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rz = np.array([[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sa, -ca], [0.0, ca, -sa]])
    dry = np.array([[-sb, 0.0, cb], [0.0, 0.0, 0.0], [-cb, 0.0, -sb]])
    drz = np.array([[-sg, -cg, 0.0], [cg, -sg, 0.0], [0.0, 0.0, 0.0]])
    return rx, ry, rz, drx, dry, drz


def rotation_matrix(angles) -> np.ndarray:
    """Plain-numpy ``Rz(g) @ Ry(b) @ Rx(a)`` for ``angles = (a, b, g)``."""
    rx, ry, rz, *_ = _axis_rotations(np.asarray(angles, dtype=np.float64))
    return rz @ ry @ rx


def euler_to_matrix(angles: TensorLike) -> Tensor:
    """Differentiable rotation matrix from X-Y-Z Euler angles."""
    angles = as_tensor(angles)
    if angles.shape != (3,):
        raise ValueError(f"euler_to_matrix expects 3 angles, got shape {angles.shape}")
    rx, ry, rz, drx, dry, drz = _axis_rotations(angles.data)
    jac = (rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx)

    def _backward(g):
        return (np.array([np.sum(g * j) for j in jac]),)

    return T.record(rz @ ry @ rx, (angles,), _backward)


def matrix_to_euler(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotation_matrix` away from gimbal lock."""
    R = np.asarray(R, dtype=np.float64)
    b = -math.asin(max(-1.0, min(1.0, R[2, 0])))
    a = math.atan2(R[2, 1], R[2, 2])
    g = math.atan2(R[1, 0], R[0, 0])
    return np.array([a, b, g])


# -- poses -------------------------------------------------------------------

@dataclass
class Pose:
    """Rigid point transform ``X -> rotation @ X + translation``.

    Both fields are tensors so that poses predicted by a network stay on the
    tape; poses built from numpy data are constants.
    """

    rotation: Tensor
    translation: Tensor

    def __post_init__(self):
        self.rotation = as_tensor(self.rotation)
        self.translation = as_tensor(self.translation)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError(f"bad pose shapes {self.rotation.shape}, {self.translation.shape}")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_euler(cls, angles, translation) -> "Pose":
        angles_t = as_tensor(angles)
        rot = euler_to_matrix(angles_t) if angles_t.requires_grad else Tensor(rotation_matrix(angles_t.data))
        return cls(rot, translation)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.data

    @property
    def t(self) -> np.ndarray:
        return self.translation.data

    def compose(self, other: "Pose") -> "Pose":
        """``self o other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -(rt @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform numpy points shaped [3] or [3, N] (constants only)."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            return self.R @ points + self.t
        return self.R @ points + self.t[:, None]

    def detach(self) -> "Pose":
        return Pose(self.rotation.data.copy(), self.translation.data.copy())

    def to_dict(self) -> dict:
        return {"angles": matrix_to_euler(self.R).tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(rotation_matrix(d["angles"]), np.asarray(d["t"], dtype=np.float64))


def pose_distance(a: Pose, b: Pose) -> float:
    """Max absolute difference between the two transforms' entries."""
    return float(max(np.max(np.abs(a.R - b.R)), np.max(np.abs(a.t - b.t))))


# -- reprojection ------------------------------------------------------------

def reproject(p_t, depth: float, pose: Pose, K: Intrinsics) -> tuple[np.ndarray, bool]:
    """Project a single pixel of the target frame into frame ``i``.

    ``p_t`` is ``(u, v)`` or homogeneous ``(u, v, 1)``.  Returns the pixel
    ``(u, v)`` in frame ``i`` and a validity flag that is false when the point
    lands behind the camera.  Bounds are not checked.
    """
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    p = np.asarray(p_t, dtype=np.float64)
    if p.shape == (2,):
        p = np.append(p, 1.0)
    X = depth * (K.inverse @ p)
    Y = pose.apply(X)
    if Y[2] <= 0:
        return np.array([np.nan, np.nan]), False
    q = K.matrix @ Y
    return q[:2] / q[2], True


def backproject(p_t, depth: float, K: Intrinsics) -> np.ndarray:
    p = np.asarray(p_t, dtype=np.float64)
    if p.shape == (2,):
        p = np.append(p, 1.0)
    return depth * (K.inverse @ p)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Homogeneous pixel coordinates [3, H*W], row-major over (v, u)."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u.ravel(), v.ravel(), np.ones(height * width)])


MIN_PROJECTED_Z = 1e-3


def reproject_grid(depth: TensorLike | None, pose: Pose, K: Intrinsics, shape: tuple[int, int] | None = None):
    """Vectorized reprojection of every target pixel.

    Computes ``K (R (depth K^-1 p) + t)`` for the whole grid.  With
    ``depth=None`` the translation is ignored and the depth-free rotation
    warp ``K R K^-1 p`` is returned instead (``shape`` must then be given).

    Returns ``(coords, valid)``: a [2, H, W] tensor of (u, v) and a boolean
    [H, W] array that is false where the point is behind the camera.
    """
    if depth is None:
        H, W = shape
    else:
        depth = as_tensor(depth)
        H, W = depth.shape
    p = pixel_grid(H, W)
    M = T.matmul(T.matmul(Tensor(K.matrix), pose.rotation), Tensor(K.inverse))
    q = T.matmul(M, Tensor(p))  # [3, HW]
    if depth is not None:
        q = q * depth.reshape(1, H * W) + T.matmul(Tensor(K.matrix), pose.translation).reshape(3, 1)
    z = q[2]
    valid = z.data > (MIN_PROJECTED_Z if depth is not None else 1e-9)
    zs = T.clamp_min(z, MIN_PROJECTED_Z if depth is not None else 1e-9)
    coords = (q[0:2] / zs.reshape(1, H * W)).reshape(2, H, W)
    return coords, valid.reshape(H, W)


# -- sequence-level pose handling --------------------------------------------

def compensate_to_target(poses_to_last: list[Pose], t: int) -> list[Pose]:
    """Turn ``T_{last->i}`` for every frame into ``T_{t->i}``.

    ``T_{t->i} = T_{last->i} o inverse(T_{last->t})``; the entry for the last
    frame itself is expected to be the identity.
    """
    n = len(poses_to_last)
    if not 0 <= t < n:
        raise IndexError(f"target index {t} out of range for {n} poses")
    to_last = poses_to_last[t].inverse()
    return [p.compose(to_last) for p in poses_to_last]


def translation_norm(t: TensorLike) -> Tensor:
    return T.sqrt(T.sum(as_tensor(t) * as_tensor(t)))


def normalize_translations(poses: list[Pose], r: int, nd: NominalDisplacement) -> list[Pose]:
    """Scale every translation by ``d0 / (epsilon + |t_r|)``; rotations untouched."""
    if not 0 <= r < len(poses):
        raise IndexError(f"reference index {r} out of range for {len(poses)} poses")
    scale = nd.d0 / (nd.epsilon + translation_norm(poses[r].translation))
    return [Pose(p.rotation, p.translation * scale) for p in poses]


def absolute_depth(zeta, displacement: float, nd: NominalDisplacement):
    """Convert a depth map predicted for displacement ``d0`` into scene units."""
    if not displacement > 0:
        raise ValueError(f"displacement must be positive, got {displacement}")
    return zeta * (displacement / nd.d0)
