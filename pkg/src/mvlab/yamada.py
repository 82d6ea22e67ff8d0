"""Yamada-Watanabe smoothing of |x|.

psi is a continuous density supported on [a, b] = [eps/gamma, eps] with
0 <= psi(z) <= 2 / (z ln gamma) and unit mass. V(x) = int_0^|x| int_0^y psi
is then C^2 with |x| - eps <= V(x) <= |x| and 0 <= V'' <= 2 / (|x| ln gamma).

The profile used here is psi(z) = 2 / (z ln gamma) * s(z) with s a
trapezoid: 0 outside [a, b], rising linearly on [a, a(1+r)], 1 on the
plateau, falling linearly on [b/(1+r), b]. Its mass is
2 - 2 ln(1+r) / ln gamma, so the normalising ramp is r = sqrt(gamma) - 1,
where the plateau shrinks to the single point sqrt(a b).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SmoothingSpec",
    "make_smoothing",
    "make_smoothing_eps",
    "psi",
    "psi_bound",
    "big_psi",
    "v",
    "v_prime",
    "v_double_prime",
    "ramp_mass",
    "probe_points",
    "check_invariants",
]


def ramp_mass(gamma: float, ramp: float) -> float:
    """Integral of the trapezoidal profile with ramp ``ramp``."""
    return 2.0 - 2.0 * math.log1p(ramp) / math.log(gamma)


@dataclass(frozen=True)
class SmoothingSpec:
    gamma: float
    eps: float
    ramp: float

    @property
    def a(self) -> float:
        return self.eps / self.gamma

    @property
    def b(self) -> float:
        return self.eps

    @property
    def knots(self) -> tuple[float, float, float, float]:
        """(a, end of rising ramp, start of falling ramp, b)."""
        return (self.a, self.a * (1 + self.ramp), self.b / (1 + self.ramp), self.b)

    @property
    def log_gamma(self) -> float:
        return math.log(self.gamma)


def make_smoothing(gamma: float, eps: float) -> SmoothingSpec:
    if not gamma > 1:
        raise ValueError(f"gamma must exceed 1, got {gamma}")
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    ramp = math.sqrt(gamma) - 1.0
    if not math.isfinite(ramp) or ramp <= 0:
        raise ArithmeticError(f"no admissible ramp for gamma={gamma}")
    spec = SmoothingSpec(float(gamma), float(eps), ramp)
    a, c, e, b = spec.knots
    if not (a < c <= e * (1 + 1e-12) and e < b):
        raise ArithmeticError(f"degenerate support for gamma={gamma}, eps={eps}")
    return spec


def make_smoothing_eps(eps: float) -> SmoothingSpec:
    """The specialisation gamma = exp(1/eps)."""
    return make_smoothing(math.exp(1.0 / eps), eps)


def _pieces(spec: SmoothingSpec, z: np.ndarray):
    a, c, e, b = spec.knots
    rise = (z > a) & (z < c)
    flat = (z >= c) & (z <= e)
    fall = (z > e) & (z < b)
    return a, c, e, b, rise, flat, fall


def psi(spec: SmoothingSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    a, c, e, b, rise, flat, fall = _pieces(spec, z)
    s = np.zeros_like(z)
    s[rise] = (z[rise] - a) / (c - a)
    s[flat] = 1.0
    s[fall] = (b - z[fall]) / (b - e)
    out = np.zeros_like(z)
    pos = s > 0
    out[pos] = 2.0 * s[pos] / (z[pos] * spec.log_gamma)
    return out


def psi_bound(spec: SmoothingSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore"):
        return 2.0 / (z * spec.log_gamma)


def _xlog(y, x0):
    # antiderivative piece: int_x0^y ln(t / x0) dt
    return y * np.log(y / x0) - y + x0


def _segment_constants(spec: SmoothingSpec):
    a, c, e, b = spec.knots
    lg = spec.log_gamma
    k1 = 2.0 / (lg * (c - a))
    k2 = 2.0 / (lg * (b - e))
    psi_c = k1 * ((c - a) - a * math.log(c / a))
    psi_e = psi_c + 2.0 / lg * math.log(e / c)
    v_c = k1 * ((c - a) ** 2 / 2 - a * _xlog(c, a))
    v_e = v_c + psi_c * (e - c) + 2.0 / lg * _xlog(e, c)
    v_b = v_e + psi_e * (b - e) + k2 * (b * _xlog(b, e) - (b - e) ** 2 / 2)
    return k1, k2, psi_c, psi_e, v_c, v_e, v_b


def big_psi(spec: SmoothingSpec, y) -> np.ndarray:
    """Psi(y) = int_0^y psi(z) dz for y >= 0, in closed form per piece."""
    y = np.asarray(y, dtype=float)
    a, c, e, b, rise, flat, fall = _pieces(spec, y)
    k1, k2, psi_c, psi_e, *_ = _segment_constants(spec)
    lg = spec.log_gamma
    out = np.zeros_like(y)
    yr, yf, yd = y[rise], y[flat], y[fall]
    out[rise] = k1 * ((yr - a) - a * np.log(yr / a))
    out[flat] = psi_c + 2.0 / lg * np.log(yf / c)
    out[fall] = psi_e + k2 * (b * np.log(yd / e) - (yd - e))
    out[y >= b] = 1.0
    return out


def v(spec: SmoothingSpec, x) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=float))
    a, c, e, b, rise, flat, fall = _pieces(spec, x)
    k1, k2, psi_c, psi_e, v_c, v_e, v_b = _segment_constants(spec)
    lg = spec.log_gamma
    out = np.zeros_like(x)
    yr, yf, yd = x[rise], x[flat], x[fall]
    out[rise] = k1 * ((yr - a) ** 2 / 2 - a * _xlog(yr, a))
    out[flat] = v_c + psi_c * (yf - c) + 2.0 / lg * _xlog(yf, c)
    out[fall] = v_e + psi_e * (yd - e) + k2 * (b * _xlog(yd, e) - (yd - e) ** 2 / 2)
    tail = x >= b
    out[tail] = v_b + (x[tail] - b)
    return out


def v_prime(spec: SmoothingSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.sign(x) * big_psi(spec, np.abs(x))


def v_double_prime(spec: SmoothingSpec, x) -> np.ndarray:
    return psi(spec, np.abs(np.asarray(x, dtype=float)))


def probe_points(spec: SmoothingSpec, n: int = 1000) -> np.ndarray:
    """Probe grid: uniform on [-2, 2], log-spaced across the support, and +-10."""
    n_lin = n // 2
    n_log = n - n_lin - 2
    lin = np.linspace(-2.0, 2.0, n_lin)
    logs = np.geomspace(spec.a / 4, spec.b * 4, n_log)
    signs = np.where(np.arange(n_log) % 2 == 0, 1.0, -1.0)
    return np.concatenate([lin, signs * logs, [-10.0, 10.0]])


def _near_kink(spec: SmoothingSpec, ax: np.ndarray, h: np.ndarray) -> np.ndarray:
    near = np.zeros_like(ax, dtype=bool)
    for k in spec.knots:
        near |= np.abs(ax - k) <= 2 * h
    return near


def check_invariants(spec: SmoothingSpec, n: int = 1000, tol: float = 1e-8, fd_tol: float = 1e-6) -> dict:
    """Run the property checks on ``n`` probe points.

    Returns a mapping check name -> (worst observed violation, passed). The
    mass of psi is computed by adaptive quadrature, independently of the
    closed forms. Finite differences use h = min(1e-5, 1e-4 |x|) and skip
    points within 2h of a knot; second differences are compared relatively.
    """
    from scipy.integrate import quad

    x = probe_points(spec, n)
    ax = np.abs(x)
    val, d1, d2 = v(spec, x), v_prime(spec, x), v_double_prime(spec, x)
    a, c, e, b = spec.knots
    out = {}

    def record(name, worst, limit):
        worst = float(worst)
        out[name] = (worst, bool(worst <= limit))

    record("V_upper", np.max(val - ax), tol)
    record("V_lower", np.max(ax - spec.eps - val), tol)
    pos, neg = x >= 0, x < 0
    record("Vp_range_pos", max(np.max(-d1[pos]), np.max(d1[pos] - 1)), tol)
    record("Vp_range_neg", max(np.max(d1[neg]), np.max(-1 - d1[neg])) if neg.any() else 0.0, tol)
    record("Vpp_nonneg", np.max(-d2), tol)
    inside = (ax >= a) & (ax <= b)
    bound = np.zeros_like(ax)
    bound[inside] = psi_bound(spec, ax[inside])
    record("Vpp_bound", np.max(d2 - bound), tol)
    record("Vpp_support", np.max(np.abs(d2[~inside])) if (~inside).any() else 0.0, tol)
    mass = sum(
        quad(lambda z: float(psi(spec, z)), lo, hi, epsabs=1e-14, epsrel=1e-14, limit=200)[0]
        for lo, hi in ((a, c), (c, e), (e, b))
        if hi > lo
    )
    record("psi_mass", abs(mass - 1.0), tol)
    sat = ax >= b
    record("Vp_saturates", np.max(np.abs(np.abs(d1[sat]) - 1.0)) if sat.any() else 0.0, tol)
    below = ax <= a
    record("V_zero_below_support", np.max(np.abs(val[below]) + np.abs(d2[below])) if below.any() else 0.0, tol)
    record("V_at_zero", abs(float(v(spec, 0.0))), 0.0)

    h = np.minimum(1e-5, 1e-4 * ax)
    ok = (h > 0) & ~_near_kink(spec, ax, h)
    xs, hs = x[ok], h[ok]
    fd1 = (v(spec, xs + hs) - v(spec, xs - hs)) / (2 * hs)
    record("fd_first", np.max(np.abs(fd1 - d1[ok])), fd_tol)
    h2 = np.minimum(1e-3, 1e-3 * ax)
    ok2 = (h2 > 0) & ~_near_kink(spec, ax, h2)
    xs, hs = x[ok2], h2[ok2]
    fd2 = (v(spec, xs + hs) - 2 * v(spec, xs) + v(spec, xs - hs)) / hs**2
    scale = np.maximum(np.abs(d2[ok2]), 1.0)
    record("fd_second_rel", np.max(np.abs(fd2 - d2[ok2]) / scale), 1e-4)

    return out
