"""Fast sanity checks of geometry, warping, losses and gradients (a few seconds)."""

from __future__ import annotations

import numpy as np

from .geometry import (
    Intrinsics,
    NominalDisplacement,
    Pose,
    compensate_to_target,
    normalize_translations,
    reproject,
)
from .gradcheck import run_gradcheck
from .losses import LossWeights, smooth_loss, ssim, total_loss
from .warp import inverse_warp, stabilize


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    K = Intrinsics.centered(32, 32)
    img = rng.uniform(0, 1, (3, 32, 32))
    out = []

    w = inverse_warp(img, np.full((32, 32), 3.0), Pose.identity(), K)
    err = float(np.max(np.abs(w.image.data - img)))
    out.append(("identity warp", err <= 1e-6, f"max err {err:.1e}"))

    worst = 0.0
    for _ in range(20):
        pose = Pose.from_euler(rng.uniform(-0.1, 0.1, 3), np.zeros(3))
        depth = rng.uniform(0.5, 50.0, (32, 32))
        a = stabilize(img, pose.rotation, K).image.data
        b = inverse_warp(img, depth, pose, K).image.data
        worst = max(worst, float(np.max(np.abs(a - b))))
    out.append(("stabilization = zero-translation warp", worst <= 1e-9, f"max err {worst:.1e}"))

    pose = Pose.from_euler(rng.uniform(-0.1, 0.1, 3), np.zeros(3))
    p = np.array([5.3, 20.1])
    u1, _ = reproject(p, 1.0, pose, K)
    u2, _ = reproject(p, 40.0, pose, K)
    err = float(np.max(np.abs(u1 - u2)))
    out.append(("rotation-only reprojection ignores depth", err <= 1e-9, f"max err {err:.1e}"))

    poses = [Pose.from_euler(rng.uniform(-0.1, 0.1, 3), rng.normal(size=3)) for _ in range(4)] + [Pose.identity()]
    comp = compensate_to_target(poses, 2)
    err = max(float(np.max(np.abs(comp[2].R - np.eye(3)))), float(np.max(np.abs(comp[2].t))))
    out.append(("compensated target pose is identity", err <= 1e-9, f"max err {err:.1e}"))

    nd = NominalDisplacement(1.0)
    norm = normalize_translations(comp, 0, nd)
    tr = float(np.linalg.norm(comp[0].t))
    err = abs(float(np.linalg.norm(norm[0].t)) - nd.d0) / nd.d0
    bound = nd.epsilon / (nd.epsilon + tr)  # exact shortfall of the guarded ratio
    out.append(("normalized reference translation", err <= bound + 1e-12, f"rel err {err:.1e} (bound {bound:.1e})"))

    s = ssim(img, img).data
    err = float(np.max(np.abs(s - 1)))
    out.append(("ssim(I, I) = 1", err <= 1e-9, f"max err {err:.1e}"))

    zeta = rng.uniform(1, 5, (32, 32))
    a, b = smooth_loss(zeta, img).item(), smooth_loss(zeta * 7.5, img).item()
    const = smooth_loss(np.full((32, 32), 2.0), img).item()
    out.append(("smoothness scale invariance", abs(a - b) <= 1e-9 and abs(const) <= 1e-12, f"diff {abs(a - b):.1e}"))

    total = total_loss([(1.0, 1.0)] * 4, LossWeights(lam=0.0)).item()
    out.append(("scale weighting", abs(total - 1.875) <= 1e-12, f"{total}"))

    results = run_gradcheck(seed, size=8, probes=20, ops=["conv2d", "bilinear_sample", "ssim", "smooth_loss"], pipeline=False)
    worst = max(r.max_rel_error for r in results)
    out.append(("gradient spot check", all(r.passed for r in results), f"max rel err {worst:.1e}"))
    return out
