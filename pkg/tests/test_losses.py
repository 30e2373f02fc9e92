import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from motiondepth import tape as T
from motiondepth.gradcheck import check_function
from motiondepth.losses import LossWeights, masked_mean, photometric_l1, photometric_loss, smooth_loss, ssim, total_loss
from motiondepth.tape import Tensor
from motiondepth.warp import WarpResult

unit = st.floats(0, 1, allow_nan=False)
img = arrays(np.float64, (3, 6, 7), elements=unit)


def full(image):
    return WarpResult(Tensor(image), np.ones(np.shape(image)[1:]))


def test_ssim_constant_images():
    s = ssim(np.ones((1, 4, 4)), np.zeros((1, 4, 4))).data
    np.testing.assert_allclose(s, 0.01 / 1.01, atol=1e-12)


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.ones((1, 4, 4)), np.ones((1, 4, 5)))


@settings(max_examples=60, deadline=None)
@given(img, img)
def test_ssim_properties(a, b):
    np.testing.assert_allclose(ssim(a, a).data, 1.0, atol=1e-9)
    sab, sba = ssim(a, b).data, ssim(b, a).data
    np.testing.assert_allclose(sab, sba, atol=1e-12)
    assert np.all(sab <= 1 + 1e-12) and np.all(sab >= -1 - 1e-12)


def test_photometric_examples():
    rng = np.random.default_rng(0)
    t = rng.uniform(size=(3, 5, 5))
    assert photometric_loss([full(t)], t, 0.0).item() == 0.0
    assert photometric_loss([full(t), full(t)], t, 0.075).item() == pytest.approx(-0.15, abs=1e-9)


def test_half_masked_frame_uses_valid_half_only():
    target = np.array([[[0.0, 0.0], [0.0, 0.0]]])
    warped = np.array([[[0.2, 0.4], [0.0, 0.0]]])
    mask = np.array([[1.0, 1.0], [0.0, 0.0]])
    val = photometric_loss([WarpResult(Tensor(warped), mask)], target, 0.0).item()
    assert val == pytest.approx(0.3, abs=1e-15)
    assert masked_mean(Tensor(np.abs(warped - target)), mask).item() == pytest.approx(0.3)


def test_empty_mask_contributes_zero(caplog):
    t = np.ones((1, 3, 3))
    empty = WarpResult(Tensor(np.zeros((1, 3, 3))), np.zeros((3, 3)))
    with caplog.at_level(logging.WARNING, logger="motiondepth.losses"):
        assert photometric_loss([empty], t, 0.075).item() == 0.0
    assert "empty" in caplog.text
    assert photometric_loss([empty, full(t)], t, 0.0).item() == 0.0
    with pytest.raises(ValueError):
        photometric_loss([], t, 0.0)


def test_photometric_l1_is_mean_over_frames():
    t = np.zeros((1, 2, 2))
    assert photometric_l1([full(np.full((1, 2, 2), 0.1)), full(np.full((1, 2, 2), 0.3))], t) == pytest.approx(0.2)


def test_smooth_constant_depth_is_zero():
    rng = np.random.default_rng(1)
    assert smooth_loss(np.full((8, 8), 3.7), rng.uniform(size=(3, 8, 8))).item() == 0.0


def test_smooth_x_squared_ramp_matches_stencil():
    zeta = np.tile(np.arange(5.0) ** 2 + 1.0, (5, 1))
    image = np.full((3, 5, 5), 0.5)
    brute = 0.0
    for i in range(1, 4):
        for j in range(1, 4):
            lap = zeta[i - 1, j] + zeta[i + 1, j] + zeta[i, j - 1] + zeta[i, j + 1] - 4 * zeta[i, j]
            brute += abs(lap) / (0.0 + 0.1)
    brute /= 9 * zeta.mean()
    assert smooth_loss(zeta, image).item() == pytest.approx(brute, rel=1e-12)


def test_smooth_edges_lower_the_penalty():
    zeta = np.random.default_rng(2).uniform(1, 2, (8, 8))
    flat = np.full((3, 8, 8), 0.5)
    busy = np.random.default_rng(3).uniform(size=(3, 8, 8))
    assert smooth_loss(zeta, busy).item() < smooth_loss(zeta, flat).item()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0.1, 20)), st.floats(1e-3, 1e3), img.map(lambda x: x[:, :6, :6]))
def test_smooth_scale_invariance(zeta, k, image):
    a = smooth_loss(zeta, image).item()
    b = smooth_loss(zeta * k, image).item()
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_total_loss_examples():
    assert total_loss([(1.0, 0.0)] * 4, LossWeights()).item() == 1.875
    assert total_loss([(0.1, 0.02)], LossWeights(lam=3.0, num_scales=1)).item() == pytest.approx(0.16)
    assert total_loss([(0.0, 0.0)] * 4, LossWeights()).item() == 0.0
    with pytest.raises(ValueError):
        total_loss([(1.0, 0.0)] * 3, LossWeights())


def test_loss_gradients():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(2, 6, 6)), rng.uniform(size=(2, 6, 6))
    err, _ = check_function(lambda x, y: ssim(x, y), [a, b], probes=100)
    assert err <= 1e-4
    err, _ = check_function(lambda z: smooth_loss(z, a), [rng.uniform(1, 3, (6, 6))], probes=36)
    assert err <= 1e-4
