import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from mvlab.yamada import (
    big_psi,
    check_invariants,
    make_smoothing,
    make_smoothing_eps,
    psi,
    psi_bound,
    ramp_mass,
    v,
    v_double_prime,
    v_prime,
)

GRID = [(g, e) for g in (math.e, math.e**2, math.e**10) for e in (0.5, 0.1, 0.01)]


def test_rejects_invalid_arguments():
    for gamma, eps in [(1.0, 0.1), (0.5, 0.1), (2.0, 0.0), (2.0, 1.0)]:
        with pytest.raises(ValueError):
            make_smoothing(gamma, eps)


def test_ramp_normalises():
    s = make_smoothing(math.e**2, 0.1)
    assert ramp_mass(s.gamma, s.ramp) == pytest.approx(1.0, abs=1e-15)
    assert ramp_mass(s.gamma, 1e-9) == pytest.approx(2.0, abs=1e-6)


@pytest.mark.parametrize("gamma,eps", GRID + [(1.5, 0.3), (1e6, 0.9)])
def test_psi_mass_by_quadrature(gamma, eps):
    s = make_smoothing(gamma, eps)
    a, c, e, b = s.knots
    mass = sum(quad(lambda z: float(psi(s, z)), lo, hi, epsabs=1e-14, epsrel=1e-14)[0] for lo, hi in ((a, c), (c, e), (e, b)))
    assert mass == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("gamma,eps", GRID)
def test_support_and_bound(gamma, eps):
    s = make_smoothing(gamma, eps)
    z = np.geomspace(s.a / 10, s.b * 10, 1000)
    p = psi(s, z)
    assert np.all(p[(z <= s.a) | (z >= s.b)] == 0)
    assert np.all(p >= 0)
    assert np.all(p <= psi_bound(s, z) * (1 + 1e-12))


@pytest.mark.parametrize("gamma,eps", GRID)
def test_invariant_suite(gamma, eps):
    checks = check_invariants(make_smoothing(gamma, eps))
    assert all(ok for _, ok in checks.values()), {k: w for k, (w, ok) in checks.items() if not ok}


def test_v_examples():
    s = make_smoothing(math.e**2, 0.1)
    assert v(s, 0.0) == 0.0
    x = np.array([0.1, 0.2, 5.0, -0.1, -3.0])
    np.testing.assert_array_equal(v_prime(s, x), np.sign(x))
    small = np.array([0.0, s.a, -s.a, s.a / 2])
    assert np.all(v(s, small) == 0) and np.all(v_double_prime(s, small) == 0)


def _piecewise_quad(f, lo, hi, knots):
    cuts = [lo] + [k for k in knots if lo < k < hi] + [hi]
    return sum(quad(f, u, w, epsabs=1e-14, epsrel=1e-13, limit=200)[0] for u, w in zip(cuts, cuts[1:]))


def test_v_is_even_and_matches_nested_quadrature():
    s = make_smoothing(math.e**3, 0.2)

    def inner(y):
        return _piecewise_quad(lambda z: float(psi(s, z)), 0.0, y, s.knots)

    for x in (0.01, 0.05, 0.1, 0.15, 0.3):
        outer = _piecewise_quad(inner, 0.0, x, s.knots)
        assert float(v(s, x)) == pytest.approx(outer, abs=1e-10)
        assert float(v(s, -x)) == float(v(s, x))
        assert float(big_psi(s, x)) == pytest.approx(inner(x), abs=1e-12)


def test_approximation_gap_shrinks_with_eps():
    gamma = math.e**2
    x = np.linspace(-2, 2, 4001)
    gaps = [np.max(np.abs(x) - v(make_smoothing(gamma, e), x)) for e in (0.5, 0.1, 0.01)]
    assert all(g <= e for g, e in zip(gaps, (0.5, 0.1, 0.01)))
    assert gaps[0] > gaps[1] > gaps[2]


def test_eps_specialisation():
    s = make_smoothing_eps(0.2)
    assert s.gamma == pytest.approx(math.exp(5.0))
    assert s.log_gamma == pytest.approx(5.0)


@settings(max_examples=50, deadline=None)
@given(log_gamma=st.floats(0.5, 20), eps=st.floats(0.001, 0.99), x=st.floats(-3, 3))
def test_bounds_hold_everywhere(log_gamma, eps, x):
    s = make_smoothing(math.exp(log_gamma), eps)
    val = float(v(s, x))
    assert abs(x) - eps - 1e-12 <= val <= abs(x) + 1e-12
    d1 = float(v_prime(s, x))
    assert -1 - 1e-12 <= d1 <= 1 + 1e-12 and d1 * x >= 0
    d2 = float(v_double_prime(s, x))
    assert d2 >= 0
    if d2 > 0:
        assert d2 <= 2 / (abs(x) * log_gamma) * (1 + 1e-12)
