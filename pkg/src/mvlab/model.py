"""Model class for mean-field SDEs dX = b(X, mu) dt + sigma(X) dW.

Coefficients are evaluated on batches: ``x`` is an (n, d) array and the
measure argument is a :class:`MeasureView`. Drifts return (n, d). The
diffusion returns (n, 1) when d == 1 (a scalar per particle) and
(n, d, d) otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping

import numpy as np

from .measure import EmpiricalMeasure, wasserstein_1d, wasserstein_matching

__all__ = [
    "RegularityProfile",
    "MeasureView",
    "ModelSpec",
    "FAMILIES",
    "make_builtin_model",
    "validate_model",
    "ProbeConfig",
    "ValidationReport",
]

FAMILY_CLASSES = ("H1H2_1d", "A1A2_multid", "custom")


@dataclass(frozen=True)
class RegularityProfile:
    """Declared regularity constants of a model.

    For one-dimensional families ``alpha`` is the Hölder exponent of the
    diffusion and ``beta`` the Hölder exponent of the monotone drift part.
    For multi-dimensional families ``alpha`` is the Hölder exponent of the
    drift in space and ``K`` its constant; ``K2`` then bounds the Lipschitz
    constant of sigma and ``sigma_min`` the smallest singular value.
    """

    dimension: int = 1
    alpha: float = 1.0
    beta: float = 1.0
    K1: float = 0.0
    K2: float = 0.0
    K: float = 0.0
    sigma_min: float = 0.0
    one_dim_class: bool = True

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.dimension}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.one_dim_class and self.alpha < 0.5:
            raise ValueError(f"one-dimensional families need alpha in [1/2, 1], got {self.alpha}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        for name in ("K1", "K2", "K", "sigma_min"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


class MeasureView:
    """Read-only access to an empirical measure for drift evaluation.

    Drifts see the law only through these functionals, each of which is
    W1-Lipschitz (mean, user Lipschitz averages) or a plain moment.
    """

    def __init__(self, atoms: np.ndarray):
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        self._atoms = atoms

    @classmethod
    def of(cls, m) -> MeasureView:
        if isinstance(m, MeasureView):
            return m
        if isinstance(m, EmpiricalMeasure):
            return cls(m.atoms)
        return cls(np.asarray(m, dtype=float))

    @property
    def sample(self) -> np.ndarray:
        v = self._atoms.view()
        v.setflags(write=False)
        return v

    @property
    def n(self) -> int:
        return self._atoms.shape[0]

    @cached_property
    def mean(self) -> np.ndarray:
        return self._atoms.mean(axis=0)

    def abs_moment(self, p: float) -> float:
        if p < 1:
            raise ValueError("abs_moment needs p >= 1")
        return float(np.mean(np.linalg.norm(self._atoms, axis=1) ** p))

    def lip_average(self, phi: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Average of ``phi`` over the atoms; ``phi`` maps (n, d) -> (n, ...)."""
        return np.mean(np.asarray(phi(self._atoms), dtype=float), axis=0)


Drift = Callable[[np.ndarray, MeasureView], np.ndarray]
Diffusion = Callable[[np.ndarray], np.ndarray]


def _zero_drift(x: np.ndarray, m: MeasureView) -> np.ndarray:
    return np.zeros_like(x)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    profile: RegularityProfile
    b1: Drift = _zero_drift
    b2: Drift = _zero_drift
    sigma: Diffusion = None
    family_class: str = "custom"
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.family_class not in FAMILY_CLASSES:
            raise ValueError(f"unknown family class {self.family_class!r}")
        if self.sigma is None:
            raise ValueError("a diffusion coefficient is required")

    @property
    def dim(self) -> int:
        return self.profile.dimension

    def drift(self, x: np.ndarray, m) -> np.ndarray:
        m = MeasureView.of(m)
        return self.b1(x, m) + self.b2(x, m)

    def diffusion(self, x: np.ndarray) -> np.ndarray:
        return self.sigma(x)


# ---------------------------------------------------------------------------
# built-in families


def _signed_power(x: np.ndarray, p: float) -> np.ndarray:
    return np.sign(x) * np.abs(x) ** p


def _linear_mf(params) -> ModelSpec:
    a, c, s = float(params["a"]), float(params["c"]), float(params["s"])
    # the non-increasing part of a*x goes to b1, everything else to b2
    a1, a2 = min(a, 0.0), max(a, 0.0)

    def b1(x, m):
        return a1 * x

    def b2(x, m):
        return a2 * x + c * m.mean

    def sigma(x):
        return np.full_like(x, s)

    profile = RegularityProfile(
        dimension=1, alpha=1.0, beta=1.0, K1=max(abs(a), abs(c)), K2=0.0
    )
    return ModelSpec("linear_mf", profile, b1, b2, sigma, "H1H2_1d", dict(params))


def _monotone_part(lam: float, beta: float):
    def b1(x, m):
        return -lam * _signed_power(x, beta)

    return b1


def _truncated_mean_part(k1: float, bound: float):
    def b2(x, m):
        mean = np.clip(m.mean, -bound, bound)
        return np.broadcast_to(k1 * mean, x.shape).copy()

    return b2


def _check_common_1d(lam, beta, k1, bound):
    if lam < 0:
        raise ValueError("lambda must be nonnegative (b1 must be non-increasing)")
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    if k1 < 0 or bound < 0:
        raise ValueError("K1 and B must be nonnegative")


def _holder_drift_1d(params) -> ModelSpec:
    lam, beta = float(params.get("lambda", 1.0)), float(params.get("beta", 0.5))
    k1, bound = float(params.get("K1", 0.5)), float(params.get("B", 1e3))
    s = float(params.get("s", 1.0))
    _check_common_1d(lam, beta, k1, bound)

    def sigma(x):
        return np.full_like(x, s)

    # sign(x)|x|^beta is beta-Hölder with constant 2^(1 - beta)
    profile = RegularityProfile(
        dimension=1, alpha=1.0, beta=beta, K1=max(lam * 2 ** (1 - beta), k1), K2=0.0
    )
    return ModelSpec(
        "holder_drift_1d",
        profile,
        _monotone_part(lam, beta),
        _truncated_mean_part(k1, bound),
        sigma,
        "H1H2_1d",
        dict(params),
    )


def _holder_diffusion_1d(params) -> ModelSpec:
    alpha = float(params.get("alpha", 0.75))
    kappa, cap = float(params.get("kappa", 1.0)), float(params.get("S", 10.0))
    lam, beta = float(params.get("lambda", 1.0)), float(params.get("beta", 1.0))
    k1, bound = float(params.get("K1", 0.5)), float(params.get("B", 1e3))
    if not 0.5 <= alpha <= 1:
        raise ValueError(f"holder_diffusion_1d needs alpha in [1/2, 1], got {alpha}")
    if kappa < 0 or cap < 0:
        raise ValueError("kappa and S must be nonnegative")
    _check_common_1d(lam, beta, k1, bound)

    def sigma(x):
        return np.minimum(kappa * np.abs(x) ** alpha, cap)

    # ||x|^a - |y|^a| <= ||x| - |y||^a <= |x - y|^a, and min(., S) keeps the constant
    profile = RegularityProfile(
        dimension=1, alpha=alpha, beta=beta, K1=max(lam * 2 ** (1 - beta), k1), K2=kappa
    )
    return ModelSpec(
        "holder_diffusion_1d",
        profile,
        _monotone_part(lam, beta),
        _truncated_mean_part(k1, bound),
        sigma,
        "H1H2_1d",
        dict(params),
    )


def _bounded_holder_multid(params) -> ModelSpec:
    d = int(params.get("d", 2))
    alpha = float(params.get("alpha", 0.5))
    amp, c = float(params.get("A", 1.0)), float(params.get("c", 0.5))
    eps = float(params.get("eps", 0.3))
    if d < 1:
        raise ValueError("d must be >= 1")
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if amp < 0 or eps < 0:
        raise ValueError("A and eps must be nonnegative")

    def b1(x, m):
        return amp * np.sign(x) * np.minimum(np.abs(x), 1.0) ** alpha

    def b2(x, m):
        return np.broadcast_to(c * np.tanh(m.mean), x.shape).copy()

    eye = np.eye(d)

    def sigma(x):
        # D_ij(x) = sin(x_i + x_j) / d has spectral norm <= 1
        pert = np.sin(x[:, :, None] + x[:, None, :]) / d
        return eye + eps * pert

    # component map sign(t) min(|t|, 1)^alpha is alpha-Hölder with 2^(1 - alpha)
    k_drift = max(amp * 2 ** (1 - alpha) * math.sqrt(d), abs(c))
    profile = RegularityProfile(
        dimension=d,
        alpha=alpha,
        beta=1.0,
        K1=abs(c),
        K2=2 * eps / math.sqrt(d),
        K=k_drift,
        sigma_min=max(0.0, 1 - eps),
        one_dim_class=False,
    )
    return ModelSpec(
        "bounded_holder_multid", profile, b1, b2, sigma, "A1A2_multid", dict(params)
    )


FAMILIES = {
    "linear_mf": _linear_mf,
    "holder_drift_1d": _holder_drift_1d,
    "holder_diffusion_1d": _holder_diffusion_1d,
    "bounded_holder_multid": _bounded_holder_multid,
}

_REQUIRED = {"linear_mf": ("a", "c", "s")}


def make_builtin_model(family_id: str, params: Mapping | None = None) -> ModelSpec:
    """Instantiate a built-in family.

    Families and parameters (defaults in brackets):

    * ``linear_mf``: a, c, s (all required); b = a x + c mean(mu), sigma = s.
    * ``holder_drift_1d``: lambda [1], beta [0.5], K1 [0.5], B [1e3], s [1].
    * ``holder_diffusion_1d``: alpha [0.75], kappa [1], S [10], lambda [1],
      beta [1], K1 [0.5], B [1e3]; sigma = min(kappa |x|^alpha, S).
    * ``bounded_holder_multid``: d [2], alpha [0.5], A [1], c [0.5], eps [0.3].
    """
    params = dict(params or {})
    try:
        factory = FAMILIES[family_id]
    except KeyError:
        raise ValueError(
            f"unknown model family {family_id!r}; choose from {sorted(FAMILIES)}"
        ) from None
    missing = [k for k in _REQUIRED.get(family_id, ()) if k not in params]
    if missing:
        raise ValueError(f"{family_id} is missing parameters {missing}")
    return factory(params)


# ---------------------------------------------------------------------------
# numerical assumption checks


@dataclass(frozen=True)
class ProbeConfig:
    box_radius: float = 3.0
    n_pairs: int = 200
    seed: int = 0
    tol: float = 1e-9
    atoms: int = 16


@dataclass
class CheckEntry:
    name: str
    observed: float
    declared: float
    passed: bool
    note: str = ""


@dataclass
class ValidationReport:
    model: str
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failures(self) -> list:
        return [e.name for e in self.entries if not e.passed]

    def add(self, name, observed, declared, passed, note=""):
        self.entries.append(CheckEntry(name, float(observed), float(declared), bool(passed), note))

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "passed": self.passed,
            "entries": [vars(e) for e in self.entries],
        }


def _w1(u: np.ndarray, v: np.ndarray) -> float:
    if u.shape[1] == 1:
        return wasserstein_1d(1, u, v)
    return wasserstein_matching(1, u, v)


def _quotient(num: np.ndarray, den: np.ndarray) -> float:
    ok = den > 0
    if not ok.any():
        return 0.0
    return float(np.max(num[ok] / den[ok]))


def validate_model(model: ModelSpec, probe: ProbeConfig | None = None) -> ValidationReport:
    """Falsification checks of the declared regularity on random probes.

    Draws ``n_pairs`` point pairs in the box [-R, R]^d together with pairs of
    random empirical measures, and compares observed Hölder, Lipschitz and
    monotonicity quotients with the declared profile (up to ``tol``).
    """
    probe = probe or ProbeConfig()
    if probe.n_pairs < 1 or probe.box_radius <= 0:
        raise ValueError("n_pairs must be >= 1 and box_radius > 0")
    prof, d, tol = model.profile, model.dim, probe.tol
    rng = np.random.default_rng(probe.seed)
    n, r = probe.n_pairs, probe.box_radius
    report = ValidationReport(model.name)

    x = rng.uniform(-r, r, (n, d))
    y = rng.uniform(-r, r, (n, d))
    # mix in close pairs so that small-scale Hölder behaviour is probed too
    close = rng.random(n) < 0.5
    y[close] = x[close] + rng.uniform(-1, 1, (close.sum(), d)) * 10.0 ** rng.uniform(-6, 0, (close.sum(), 1))
    mus = [rng.uniform(-r, r, (probe.atoms, d)) + rng.normal(0, 1, d) for _ in range(n)]
    nus = [rng.uniform(-r, r, (probe.atoms, d)) + rng.normal(0, 1, d) for _ in range(n)]
    w1 = np.array([_w1(u, v) for u, v in zip(mus, nus)])
    dist = np.linalg.norm(x - y, axis=1)

    def per_pair(f, pts, measures):
        return np.stack([f(pts[i : i + 1], MeasureView(measures[i]))[0] for i in range(n)])

    b1_xm = per_pair(model.b1, x, mus)
    b1_ym = per_pair(model.b1, y, mus)
    b1_xn = per_pair(model.b1, x, nus)
    b2_xm = per_pair(model.b2, x, mus)
    b2_yn = per_pair(model.b2, y, nus)
    sx, sy = model.sigma(x), model.sigma(y)

    finite = all(np.all(np.isfinite(v)) for v in (b1_xm, b1_ym, b1_xn, b2_xm, b2_yn, sx, sy))
    report.add("finite_outputs", float(finite), 1.0, finite)
    if not finite:
        return report

    norm = lambda v: np.linalg.norm(v.reshape(n, -1), axis=1)  # noqa: E731

    if model.family_class == "A1A2_multid":
        b_xm, b_yn = b1_xm + b2_xm, per_pair(model.b1, y, nus) + b2_yn
        # |b(x,mu) - b(y,nu)| <= K (|x-y|^alpha + W1)
        q = _quotient(norm(b_xm - b_yn), dist**prof.alpha + w1)
        report.add("drift_holder_w1", q, prof.K, q <= prof.K + tol)
        sup_b = float(np.max(norm(b_xm)))
        report.add("drift_bounded", sup_b, math.inf, math.isfinite(sup_b))
    else:
        q = _quotient(norm(b1_xm - b1_ym), dist**prof.beta)
        report.add("b1_holder", q, prof.K1, q <= prof.K1 + tol)
        q = _quotient(norm(b1_xm - b1_xn), w1)
        report.add("b1_w1_lipschitz", q, prof.K1, q <= prof.K1 + tol)
        q = _quotient(norm(b2_xm - b2_yn), dist + w1)
        report.add("b2_lipschitz", q, prof.K1, q <= prof.K1 + tol)

    if d == 1:
        # (b1(y) - b1(x)) (y - x) <= 0 for a non-increasing b1
        incr = float(np.max((b1_ym - b1_xm)[:, 0] * (y - x)[:, 0]))
        report.add("b1_non_increasing", incr, 0.0, incr <= tol)

    sig_exp = 1.0 if model.family_class == "A1A2_multid" else prof.alpha
    q = _quotient(norm(sx - sy), dist**sig_exp)
    report.add("sigma_holder", q, prof.K2, q <= prof.K2 + tol)

    if d > 1 or model.family_class == "A1A2_multid":
        mats = np.concatenate([sx, sy]).reshape(2 * n, d, d)
        svals = np.linalg.svd(mats, compute_uv=False)
        smin = float(svals[:, -1].min())
        report.add(
            "sigma_min_singular_value",
            smin,
            prof.sigma_min,
            smin >= max(tol, prof.sigma_min - tol),
        )
        # det(sigma) is continuous; a sign change between probes forces a singular point
        dets = np.linalg.det(mats)
        sign_change = bool(dets.min() <= 0 <= dets.max())
        report.add("sigma_det_sign_constant", float(dets.min()), 0.0, not sign_change)
        report.add("sigma_bounded", float(svals[:, 0].max()), math.inf, True)
    return report
