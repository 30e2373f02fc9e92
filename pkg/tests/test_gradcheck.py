import numpy as np
import pytest

from motiondepth import tape as T
from motiondepth.gradcheck import OP_NAMES, format_results, relative_error, run_gradcheck
from motiondepth.tape import Tensor, as_tensor


def corrupted_exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * 1.01,))


def test_every_op_passes_tolerance():
    results = run_gradcheck(seed=0, size=8, probes=100, pipeline=False)
    assert [r.name for r in results] == OP_NAMES
    failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not failed
    assert all(r.probes == 100 for r in results)


def test_pipeline_passes_tolerance():
    (res,) = [r for r in run_gradcheck(seed=1, ops=["exp"], pipeline=True) if r.name == "pipeline"]
    assert res.tolerance == 1e-3
    assert res.probes >= 100
    assert res.passed, res.max_rel_error


def test_corrupted_backward_is_caught(monkeypatch):
    monkeypatch.setattr(T, "exp", corrupted_exp)
    (res,) = run_gradcheck(seed=0, ops=["exp"], pipeline=False)
    assert not res.passed
    assert res.max_rel_error == pytest.approx(0.01 / 1.01, rel=1e-3)


def test_report_lists_every_op():
    results = run_gradcheck(seed=0, ops=["add", "ssim"], pipeline=False)
    text = format_results(results)
    assert "add" in text and "ssim" in text and "PASS" in text


def test_relative_error_floor():
    a = np.array([1.0, 1e-12])
    n = np.array([1.0, 2e-12])
    assert relative_error(a, n).max() < 1e-8
