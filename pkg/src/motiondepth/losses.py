"""Training objective: SSIM, photometric dissimilarity, depth smoothness, scale aggregation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tape as T
from .tape import Tensor, TensorLike, as_tensor
from .warp import WarpResult

log = logging.getLogger(__name__)

SSIM_C1 = 0.01
SSIM_C2 = 0.09
GRADIENT_EPS = 0.1


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.075
    lam: float = 3.0
    num_scales: int = 4

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("loss weights must be non-negative")
        if self.num_scales < 1:
            raise ValueError("num_scales must be >= 1")


def gaussian_kernel(size: int = 3, sigma: float = 1.0) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_GAUSS_1D = gaussian_kernel(3, 1.0).sum(axis=0)


def _local_means(x: Tensor) -> Tensor:
    """Gaussian-weighted 3x3 means (separable), mirrored borders."""
    padded = T.pad_reflect(x, 1)
    return T.filter2d(T.filter2d(padded, _GAUSS_1D[None, :]), _GAUSS_1D[:, None])


def ssim(a: TensorLike, b: TensorLike) -> Tensor:
    """Per-pixel SSIM map of two [C,H,W] images in [0, 1].

    Local statistics use a 3x3 Gaussian window (sigma 1) with mirrored
    borders.  The numerator is the usual product of the luminance and
    contrast-structure terms.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    C = a.shape[0]
    stats = _local_means(T.concat([a, b, a * a, b * b, a * b], axis=0))
    mu_a, mu_b = stats[:C], stats[C : 2 * C]
    mu_ab = mu_a * mu_b
    mu_a2, mu_b2 = mu_a * mu_a, mu_b * mu_b
    var_a = stats[2 * C : 3 * C] - mu_a2
    var_b = stats[3 * C : 4 * C] - mu_b2
    cov = stats[4 * C :] - mu_ab
    num = (2 * mu_ab + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a2 + mu_b2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` [C,H,W] over cells where ``mask`` [H,W] is 1 (all channels)."""
    count = float(mask.sum()) * x.shape[0]
    return T.sum(x * mask) * (1.0 / count)


def photometric_loss(warped: Sequence[WarpResult], target: TensorLike, alpha: float) -> Tensor:
    """Sum over frames of masked mean |I_hat - I_t| minus alpha times masked mean SSIM."""
    if not warped:
        raise ValueError("photometric_loss needs at least one warped frame")
    target = as_tensor(target)
    total: Tensor | None = None
    for w in warped:
        if w.mask.sum() == 0:
            log.warning("warped frame has an empty validity mask; it contributes 0")
            continue
        term = masked_mean(T.abs(w.image - target), w.mask)
        if alpha:
            term = term - alpha * masked_mean(ssim(w.image, target), w.mask)
        total = term if total is None else total + term
    return Tensor(0.0) if total is None else total


def photometric_l1(warped: Sequence[WarpResult], target: TensorLike) -> float:
    """Mean over frames of the masked mean absolute error (no gradient)."""
    target = as_tensor(target)
    vals = [
        float((np.abs(w.image.data - target.data) * w.mask).sum() / (w.mask.sum() * target.shape[0]))
        for w in warped
        if w.mask.sum() > 0
    ]
    return float(np.mean(vals)) if vals else float("nan")


_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def image_gradient_magnitude(image: np.ndarray) -> np.ndarray:
    """Channel-mean central-difference gradient magnitude on interior pixels [H-2, W-2]."""
    image = np.asarray(image, dtype=np.float64)
    gx = 0.5 * (image[:, 1:-1, 2:] - image[:, 1:-1, :-2])
    gy = 0.5 * (image[:, 2:, 1:-1] - image[:, :-2, 1:-1])
    return np.sqrt(gx**2 + gy**2).mean(axis=0)


def smooth_loss(zeta: TensorLike, target_image) -> Tensor:
    """Image-gradient weighted |Laplacian(zeta)|, divided by mean(zeta).

    Both stencils are evaluated on interior pixels only, so no padding rule
    leaks into the value.  The image is data and gets no gradient.
    """
    zeta = as_tensor(zeta)
    img = target_image.data if isinstance(target_image, Tensor) else np.asarray(target_image)
    weight = 1.0 / (image_gradient_magnitude(img) + GRADIENT_EPS)
    lap = T.filter2d(zeta, _LAPLACIAN)
    return T.mean(T.abs(lap) * weight) / T.mean(zeta)


def total_loss(per_scale: Sequence[tuple[TensorLike, TensorLike]], weights: LossWeights) -> Tensor:
    """``sum_s 2^-s (L_p^s + lambda L_g^s)`` with s = 0 the full resolution."""
    if len(per_scale) != weights.num_scales:
        raise ValueError(f"expected {weights.num_scales} scales, got {len(per_scale)}")
    total = Tensor(0.0)
    for s, (lp, lg) in enumerate(per_scale):
        total = total + (as_tensor(lp) + weights.lam * as_tensor(lg)) * (0.5**s)
    return total
