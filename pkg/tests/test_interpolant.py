import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momaql.errors import DimensionError, DomainError
from momaql.interpolant import (conditional_resample, ddim_coefficients, ddim_interpolate,
                                forward_sample)
from momaql.schedule import NoiseSchedule

FM = NoiseSchedule("fm")
VP = NoiseSchedule("vp")


def test_ddim_boundaries():
    x_t = np.array([0.3, -1.2])
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(ddim_interpolate(x_t, x, 0.7, 0.7, FM), x_t)
    np.testing.assert_array_equal(ddim_interpolate(x_t, x, 0.0, 0.7, FM), x)
    np.testing.assert_allclose(ddim_interpolate(x_t, x, 0.0, 0.7, VP), x, atol=1e-15)


def test_ddim_worked_example():
    x_t = forward_sample(np.array([1.0]), np.array([-0.5]), 0.8, FM).x_t
    assert x_t[0] == pytest.approx(-0.2, abs=1e-15)
    out = ddim_interpolate(x_t, np.array([1.0]), 0.4, 0.8, FM)
    assert out[0] == pytest.approx(0.4, abs=1e-15)


def test_ddim_errors():
    with pytest.raises(DomainError):
        ddim_interpolate(np.zeros(2), np.zeros(2), 0.0, 0.0, FM)
    with pytest.raises(DomainError):
        ddim_interpolate(np.zeros(2), np.zeros(2), 0.5, 0.4, FM)
    with pytest.raises(DimensionError):
        ddim_interpolate(np.zeros(2), np.zeros(3), 0.1, 0.4, FM)


def test_forward_examples():
    x = np.array([2.0, 0.0])
    eps = np.array([0.0, 2.0])
    np.testing.assert_array_equal(forward_sample(x, eps, 0.25, FM).x_t, [1.5, 0.5])
    np.testing.assert_array_equal(forward_sample(x, eps, 0.0, FM).x_t, x)
    np.testing.assert_array_equal(forward_sample(x, eps, 1.0, FM).x_t, eps)
    # forward noising is the jump from t = 1 where sigma_1 = 1
    np.testing.assert_allclose(forward_sample(x, eps, 0.25, FM).x_t,
                               ddim_interpolate(eps, x, 0.25, 1.0, FM), atol=1e-15)


def test_conditional_resample_boundaries():
    x = np.array([0.5])
    x_t = np.array([-0.3])
    np.testing.assert_array_equal(conditional_resample(x, x_t, 0.6, 0.6, FM), x_t)
    np.testing.assert_array_equal(conditional_resample(x, x_t, 0.0, 0.6, FM), x)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["fm", "vp"]))
def test_path_identity_property(seed, kind):
    sched = NoiseSchedule(kind)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 3))
    eps = rng.normal(size=(8, 3))
    t = rng.uniform(1e-3, 1.0, size=8)
    r = rng.uniform(0.0, 1.0, size=8) * t
    x_t = forward_sample(x, eps, t, sched).x_t
    direct = forward_sample(x, eps, r, sched).x_t
    assert np.max(np.abs(conditional_resample(x, x_t, r, t, sched) - direct)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["fm", "vp"]))
def test_composition_property(seed, kind):
    sched = NoiseSchedule(kind)
    rng = np.random.default_rng(seed)
    t = rng.uniform(1e-3, 1.0)
    r = rng.uniform(1e-4, t)
    s = rng.uniform(0.0, r)
    x = rng.normal(size=4)
    x_t = rng.normal(size=4)
    two = ddim_interpolate(ddim_interpolate(x_t, x, r, t, sched), x, s, r, sched)
    assert np.max(np.abs(two - ddim_interpolate(x_t, x, s, t, sched))) <= 1e-10


def test_affine_in_inputs():
    rng = np.random.default_rng(0)
    x1, x2, y1, y2 = rng.normal(size=(4, 3))
    lam = 0.3
    lhs = ddim_interpolate(lam * y1 + (1 - lam) * y2, lam * x1 + (1 - lam) * x2, 0.2, 0.7, VP)
    rhs = lam * ddim_interpolate(y1, x1, 0.2, 0.7, VP) + (1 - lam) * ddim_interpolate(y2, x2, 0.2, 0.7, VP)
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def test_coefficients_formula():
    # independent evaluation of the coefficient formulas
    s, t = 0.3, 0.8
    cc, cn = ddim_coefficients(s, t, FM)
    assert cn == pytest.approx(0.3 / 0.8, rel=1e-15)
    assert cc == pytest.approx(0.7 - 0.3 / 0.8 * 0.2, rel=1e-15)
