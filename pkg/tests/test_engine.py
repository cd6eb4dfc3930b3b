import math

import numpy as np
import pytest

from rawres.engine import (NumericalError, derive_seed, finite_diff_grad, glorot_limit, glorot_uniform, make_rng,
                           max_relative_error)
from rawres.layers import dense_softmax_xent


def test_glorot_limit_unit():
    assert glorot_limit(3, 3) == 1.0


def test_glorot_limit_stem_kernel():
    # kernel 80, c_in 1, c_out 48: fan_in 80, fan_out 3840
    assert glorot_limit(80, 80 * 48) == pytest.approx(math.sqrt(6 / 3920))
    assert glorot_limit(80, 3840) == pytest.approx(0.03912, abs=1e-5)


def test_glorot_uniform_statistics():
    v = glorot_uniform((100_000,), 3, 3, make_rng(0))
    assert abs(v.mean()) < 0.01
    assert np.max(np.abs(v)) <= 1.0
    # variance of U(-1, 1) is 1/3
    assert v.var() == pytest.approx(1 / 3, abs=0.01)


def test_glorot_rejects_zero_fan():
    with pytest.raises(ValueError):
        glorot_uniform((2,), 0, 3, make_rng(0))


def test_rng_reproducible():
    a = make_rng(42).standard_normal(50)
    b = make_rng(42).standard_normal(50)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, make_rng(43).standard_normal(50))


def test_derive_seed_stable():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1)
    assert derive_seed(0, "a", 1) != derive_seed(0, "a", 2)
    assert 0 <= derive_seed(0, "x") < 2**64


def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda x: float(np.sum(x * x)), np.array([1.0, 2.0]), 1e-5)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_finite_diff_constant():
    g = finite_diff_grad(lambda x: 3.0, np.array([[1.0, -2.0], [0.5, 9.0]]))
    assert np.array_equal(g, np.zeros((2, 2)))


def test_finite_diff_does_not_modify_point():
    x = np.array([1.0, 2.0, 3.0])
    finite_diff_grad(lambda v: float(np.sum(v ** 3)), x)
    assert np.array_equal(x, [1.0, 2.0, 3.0])


def test_finite_diff_reports_nonfinite():
    with pytest.raises(NumericalError, match=r"\(1,\)"):
        finite_diff_grad(lambda v: math.sqrt(v[1] - 2.0) if v[1] >= 2.0 else float("nan"), np.array([1.0, 2.0]))


def test_finite_diff_matches_softmax_xent():
    rng = make_rng(3)
    logits = rng.standard_normal((1, 3))
    eye = np.eye(3)
    zero = np.zeros(3)
    loss, _, grads = dense_softmax_xent(eye, zero, logits, [2])
    numeric = finite_diff_grad(lambda v: dense_softmax_xent(eye, zero, v, [2])[0], logits)
    assert max_relative_error(grads["input"], numeric) < 1e-6


def test_max_relative_error_floor():
    assert max_relative_error([0.0], [1e-12]) == pytest.approx(1e-4)
    assert max_relative_error([2.0], [2.0]) == 0.0
