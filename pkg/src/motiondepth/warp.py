"""Differentiable bilinear sampling, inverse warping and rotation-only stabilization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .geometry import Intrinsics, Pose, reproject_grid
from .tape import Tensor, TensorLike, as_tensor

EDGE_TOL = 1e-9  # pixels


@dataclass
class WarpResult:
    """Synthesized view and its validity mask.

    ``mask`` is a constant float array of 0/1 values; the image is exactly 0
    wherever the mask is 0.
    """

    image: Tensor
    mask: np.ndarray


def bilinear_sample(src: TensorLike, coords: TensorLike, valid: np.ndarray | None = None) -> WarpResult:
    """Sample ``src`` [C,H,W] at fractional (u, v) locations ``coords`` [2,Ho,Wo].

    Locations outside ``[0, W-1] x [0, H-1]`` (or flagged false in ``valid``)
    produce 0 with mask 0.  Gradients flow to both ``src`` and ``coords``; the
    mask itself is treated as a constant.
    """
    src, coords = as_tensor(src), as_tensor(coords)
    C, H, W = src.shape
    _, Ho, Wo = coords.shape
    u, v = coords.data[0], coords.data[1]
    with np.errstate(invalid="ignore"):
        inside = np.isfinite(u) & np.isfinite(v)
        inside &= (u >= -EDGE_TOL) & (u <= W - 1 + EDGE_TOL) & (v >= -EDGE_TOL) & (v <= H - 1 + EDGE_TOL)
    if valid is not None:
        inside &= valid
    # round-off can push a border pixel a hair outside; snap it back onto the lattice
    uc = np.clip(np.where(inside, u, 0.0), 0, W - 1)
    vc = np.clip(np.where(inside, v, 0.0), 0, H - 1)
    x0 = np.clip(np.floor(uc).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(vc).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = uc - x0
    wy = vc - y0
    m = inside.astype(np.float64)

    flat = src.data.reshape(C, H * W)
    i00, i01, i10, i11 = y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1
    s00, s01, s10, s11 = flat[:, i00], flat[:, i01], flat[:, i10], flat[:, i11]
    w00, w01, w10, w11 = (1 - wx) * (1 - wy) * m, wx * (1 - wy) * m, (1 - wx) * wy * m, wx * wy * m
    out = w00 * s00 + w01 * s01 + w10 * s10 + w11 * s11

    def _backward(g):
        gsrc = gcoords = None
        if src.requires_grad:
            idx = np.concatenate([i00.ravel(), i01.ravel(), i10.ravel(), i11.ravel()])
            weights = np.concatenate([w00.ravel(), w01.ravel(), w10.ravel(), w11.ravel()])
            offsets = (np.arange(C) * H * W)[:, None]
            all_idx = (idx[None, :] + offsets).ravel()
            all_w = (np.tile(weights, (C, 1)) * np.tile(g.reshape(C, -1), (1, 4))).ravel()
            gsrc = np.bincount(all_idx, weights=all_w, minlength=C * H * W).reshape(C, H, W)
        if coords.requires_grad:
            gu = (g * ((1 - wy) * (s01 - s00) + wy * (s11 - s10))).sum(axis=0) * m
            gv = (g * ((1 - wx) * (s10 - s00) + wx * (s11 - s01))).sum(axis=0) * m
            gcoords = np.stack([gu, gv])
        return gsrc, gcoords

    return WarpResult(T.record(out, (src, coords), _backward), m)


def inverse_warp(src: TensorLike, depth: TensorLike, pose: Pose, K: Intrinsics) -> WarpResult:
    """Synthesize the target view from ``src`` using target depth and ``pose = T_{target->src}``."""
    depth = as_tensor(depth)
    if np.any(depth.data <= 0):
        raise ValueError("inverse_warp: depth must be strictly positive")
    coords, valid = reproject_grid(depth, pose, K)
    return bilinear_sample(src, coords, valid)


def stabilize(src: TensorLike, rotation, K: Intrinsics) -> WarpResult:
    """Rotation-only warp ``p -> K R K^-1 p``; independent of depth."""
    src = as_tensor(src)
    pose = Pose(rotation, np.zeros(3))
    coords, valid = reproject_grid(None, pose, K, shape=src.shape[-2:])
    return bilinear_sample(src, coords, valid)
