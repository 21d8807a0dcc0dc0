import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from levy_tilt.stable import StableSpec
from levy_tilt.tilting import (TiltCoeffs, conditional_gaussian, conditional_params, envelope, log_envelope,
                               log_tilt_factor, log_tilt_factor_joint)


def tilted_gaussian_integral(a, b, x, r, sg):
    """Quadrature of int exp(phi(x+y) - phi(x)) N(y; 0, r^2 sg^2) dy."""
    s = r * sg
    phi = lambda v: a * v * v + b * v
    f = lambda y: math.exp(phi(x + y) - phi(x) - 0.5 * (y / s) ** 2) / (s * math.sqrt(2 * math.pi))
    k1 = 2 * a * x + b
    centre = k1 / (1 / s**2 - 2 * a)
    width = 1 / math.sqrt(1 / s**2 - 2 * a)
    val, _ = integrate.quad(f, centre - 40 * width, centre + 40 * width, epsabs=0, epsrel=1e-12, limit=200)
    return val


def test_coeffs_reject_nonnegative_a():
    with pytest.raises(ValueError):
        TiltCoeffs([0.0], [1.0])
    with pytest.raises(ValueError):
        TiltCoeffs([-1.0, 0.5], [0.0, 0.0])
    with pytest.raises(ValueError):
        TiltCoeffs([-1.0], [0.0, 1.0])


def test_log_tilt_factor_examples():
    assert log_tilt_factor(TiltCoeffs([-1.0], [0.0]), 0, 0.0, 1.0) == -1.0
    assert log_tilt_factor(TiltCoeffs([-0.5], [1.0]), 0, 2.0, 0.1) == pytest.approx(-0.105, abs=1e-15)


def test_log_tilt_factor_is_phi_difference():
    g = np.random.default_rng(0)
    for _ in range(1000):
        a, b, x, y = -g.uniform(1e-3, 5), g.normal(0, 3), g.normal(0, 3), g.normal(0, 3)
        phi = lambda v: a * v * v + b * v
        got = log_tilt_factor(TiltCoeffs([a], [b]), 0, x, y)
        assert got == pytest.approx(phi(x + y) - phi(x), rel=1e-12, abs=1e-12)


def test_joint_factor_is_sum_over_dims():
    c = TiltCoeffs([-0.5, -2.0], [1.0, -0.3])
    x, y = np.array([0.2, -1.0]), np.array([0.7, 0.1])
    want = sum(log_tilt_factor(c, i, x[i], y[i]) for i in range(2))
    assert log_tilt_factor_joint(c, x, y) == pytest.approx(want, rel=1e-15)


def test_conditional_gaussian_symmetric_case():
    cg = conditional_gaussian(TiltCoeffs([-0.7], [0.0]), 0, 0.0, 2.0, StableSpec(1.2))
    assert cg.mu_y == 0.0
    assert cg.var_y > 0


def test_c_norm_reference_value():
    cg = conditional_gaussian(TiltCoeffs([-0.5], [0.0]), 0, 0.0, 1.0, StableSpec(1.2, sigma_g=1.0))
    assert cg.c_norm == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert abs(cg.c_norm - tilted_gaussian_integral(-0.5, 0.0, 0.0, 1.0, 1.0)) < 1e-6


def test_c_norm_matches_quadrature():
    g = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        a, b, x = -g.uniform(0.01, 3), g.normal(0, 2), g.normal(0, 2)
        r, sg = math.exp(g.uniform(math.log(1e-2), math.log(1e2))), g.uniform(0.3, 2.0)
        spec = StableSpec(1.2, 0.01, sg)
        cg = conditional_gaussian(TiltCoeffs([a], [b]), 0, x, r, spec)
        ref = tilted_gaussian_integral(a, b, x, r, sg)
        worst = max(worst, abs(cg.c_norm - ref) / ref)
        # mean and variance of the tilted kernel
        k1, s2 = 2 * a * x + b, (r * sg) ** 2
        assert cg.var_y == pytest.approx(1 / (1 / s2 - 2 * a), rel=1e-12)
        assert cg.mu_y == pytest.approx(k1 * cg.var_y, rel=1e-12, abs=1e-300)
    assert worst < 1e-5


def test_c_norm_rejects_nonpositive_r():
    with pytest.raises(ValueError):
        conditional_gaussian(TiltCoeffs([-1.0], [0.0]), 0, 0.0, 0.0, StableSpec(1.0))


def test_c_norm_log_space_no_overflow():
    # K1^2/|K2| huge: the normaliser itself overflows but its log is finite
    _, _, log_c = conditional_params(np.array([-1e-3]), np.array([60.0]), np.array([1e3]), 1.0)
    assert np.isfinite(log_c).all() and log_c[0] > 709


def test_envelope_examples():
    assert envelope(TiltCoeffs([-0.3], [0.0]), 0, 0.0) == 1.0
    assert envelope(TiltCoeffs([-1.0], [2.0]), 0, 0.0) == pytest.approx(math.e, rel=1e-15)
    assert log_envelope(TiltCoeffs([-1.0], [2.0]), 0, 0.0) == pytest.approx(1.0, rel=1e-15)


def test_envelope_dominates_random():
    g = np.random.default_rng(2)
    n = 10_000
    a = -np.exp(g.uniform(-6, 3, n))
    k1 = g.normal(0, 5, n)
    r = np.exp(g.uniform(-12, 12, n))
    _, _, log_c = conditional_params(a, k1, r, 1.0)
    assert np.count_nonzero(log_c > k1 * k1 / (4 * np.abs(a))) == 0


def test_c_norm_small_r_limit():
    cg = conditional_gaussian(TiltCoeffs([-2.0], [0.0]), 0, 0.0, 1e-6, StableSpec(1.0))
    assert 1 - 1e-4 <= cg.c_norm <= 1.0


@settings(max_examples=300, deadline=None)
@given(a=st.floats(-50, -1e-4), b=st.floats(-20, 20), x=st.floats(-20, 20), r=st.floats(1e-8, 1e8),
       sg=st.floats(0.05, 10))
def test_dominance_property(a, b, x, r, sg):
    k1 = 2 * a * x + b
    _, var, log_c = conditional_params(a, k1, r, sg)
    assert var > 0
    assert log_c <= k1 * k1 / (4 * abs(a)) + 1e-12
