"""Convergence sweeps over step size and particle count, and rate fitting."""

from __future__ import annotations

import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import (
    STREAM_EXTRA_INITIAL,
    STREAM_EXTRA_NOISE,
    STREAM_INITIAL,
    STREAM_NOISE,
    BrownianGrid,
    InitialLaw,
    RunRequest,
    simulate_coupled,
    stream_id,
    strong_error_sup,
)
from .measure import EmpiricalMeasure, wasserstein_1d, wasserstein_sliced
from .model import make_builtin_model

__all__ = [
    "DEFAULT_SEED",
    "SweepPlan",
    "RateFit",
    "SweepResult",
    "fit_rate",
    "oracle_linear_gaussian",
    "run_timestep_sweep",
    "run_chaos_sweep",
    "run_glivenko_sweep",
    "results_csv",
]

DEFAULT_SEED = 20190801

STREAM_GC_SAMPLE = 5
STREAM_GC_TRUTH = 6
TRUTH_MULTIPLE = 64


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    n_points: int
    residual_max: float


def fit_rate(points) -> RateFit:
    """Least-squares line through (log x, log y)."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError("fit_rate needs at least two (x, y) points")
    if not np.all(pts > 0):
        raise ValueError("fit_rate needs positive coordinates")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    design = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return RateFit(float(slope), float(intercept), r2, len(pts), float(np.max(np.abs(resid))))


def oracle_linear_gaussian(a, c, s, m0, v0, t) -> tuple[float, float]:
    """Mean and variance at time t of dX = (a X + c E[X]) dt + s dW."""
    mean = m0 * math.exp((a + c) * t)
    if a == 0:
        var = v0 + s * s * t
    else:
        g = math.exp(2 * a * t)
        var = g * v0 + s * s * math.expm1(2 * a * t) / (2 * a)
    return mean, var


@dataclass(frozen=True)
class SweepPlan:
    """Configuration of a step-size or particle-count sweep.

    ``factor_list`` holds step multipliers of the finest grid (T / M);
    ``factor`` is the fixed multiplier used when N varies. The reference
    runs at ``factor_ref`` with ``n_extra`` additional particles.
    """

    family: str
    params: dict = field(default_factory=dict)
    initial: InitialLaw = InitialLaw()
    T: float = 1.0
    M: int = 1024
    R: int = 4
    seed: int = DEFAULT_SEED
    N: int = 256
    N_list: tuple = ()
    factor_list: tuple = ()
    factor: int = 1
    factor_ref: int = 1
    n_extra: int = 0
    q: float = 2.0

    def check(self, kind: str) -> None:
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.M < 1 or self.M & (self.M - 1):
            raise ValueError(f"M must be a power of two, got {self.M}")
        factors = self.factor_list if kind == "dt" else (self.factor,)
        if not factors:
            raise ValueError("factor_list is empty")
        for f in factors:
            if f < 1 or self.M % f:
                raise ValueError(f"factor {f} does not divide M={self.M}")
            if f % self.factor_ref:
                raise ValueError(f"factor_ref {self.factor_ref} does not divide factor {f}")
        if self.M % self.factor_ref:
            raise ValueError("factor_ref must divide M")
        if kind == "N" and not self.N_list:
            raise ValueError("N_list is empty")

    def as_dict(self) -> dict:
        out = asdict(self)
        out["N_list"] = list(self.N_list)
        out["factor_list"] = list(self.factor_list)
        return out


@dataclass
class SweepResult:
    kind: str  # "dt", "N" or "glivenko"
    cells: list  # dicts: x, delta, rep, error, diverged
    wall_times: list = field(default_factory=list)

    @property
    def values(self) -> list:
        return sorted({c["x"] for c in self.cells})

    def errors_at(self, x) -> np.ndarray:
        return np.array([c["error"] for c in self.cells if c["x"] == x and not c["diverged"]])

    def divergences(self) -> dict:
        return {x: sum(1 for c in self.cells if c["x"] == x and c["diverged"]) for x in self.values}

    def summary(self) -> list[dict]:
        rows = []
        for x in self.values:
            errs = self.errors_at(x)
            delta = next(c["delta"] for c in self.cells if c["x"] == x)
            n = len(errs)
            rows.append(
                {
                    "x": x,
                    "delta": delta,
                    "n": n,
                    "mean": float(errs.mean()) if n else math.nan,
                    "stderr": float(errs.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
                    "median": float(np.median(errs)) if n else math.nan,
                    "divergences": self.divergences()[x],
                }
            )
        return rows

    def fit_points(self, abscissa: str = "x") -> list[tuple[float, float]]:
        return [
            (r[abscissa], r["mean"])
            for r in self.summary()
            if r["divergences"] == 0 and r["n"] and r["mean"] > 0
        ]

    def fit(self, abscissa: str = "x") -> RateFit:
        return fit_rate(self.fit_points(abscissa))

    def per_rep(self) -> np.ndarray:
        """Errors as an (R, n_values) array, NaN where a cell diverged."""
        reps = sorted({c["rep"] for c in self.cells})
        xs = self.values
        out = np.full((len(reps), len(xs)), np.nan)
        for c in self.cells:
            if not c["diverged"]:
                out[reps.index(c["rep"]), xs.index(c["x"])] = c["error"]
        return out


def _map(fn, args, workers: int):
    if workers <= 1 or len(args) <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args))


def _initial(plan: SweepPlan, n: int, d: int, rep: int, extra: bool = False) -> np.ndarray:
    tag = STREAM_EXTRA_INITIAL if extra else STREAM_INITIAL
    return plan.initial.sample(n, d, plan.seed, stream_id(tag, rep))


def _grids(plan: SweepPlan, d: int, n_main: int, rep: int):
    grid = BrownianGrid(d, n_main, plan.T, plan.M, plan.seed, stream_id(STREAM_NOISE, rep))
    extra = None
    if plan.n_extra:
        extra = BrownianGrid(d, plan.n_extra, plan.T, plan.M, plan.seed, stream_id(STREAM_EXTRA_NOISE, rep))
    return grid, extra


def _reference_request(plan: SweepPlan, x0: np.ndarray, d: int, rep: int, record_every: int) -> RunRequest:
    if plan.n_extra:
        x0 = np.concatenate([x0, _initial(plan, plan.n_extra, d, rep, extra=True)])
    return RunRequest(plan.factor_ref, x0, record_every)


def _timestep_rep(job) -> tuple[list, float]:
    plan, rep = job
    start = time.perf_counter()
    model = make_builtin_model(plan.family, plan.params)
    d = model.dim
    x0 = _initial(plan, plan.N, d, rep)
    grid, extra = _grids(plan, d, plan.N, rep)
    factors = sorted(plan.factor_list)
    ref_req = _reference_request(plan, x0, d, rep, factors[0] // plan.factor_ref)
    runs = [ref_req] + [RunRequest(f, x0) for f in factors]
    ref, *ems = simulate_coupled(model, grid, runs, extra)
    ref = ref.first(plan.N)
    cells = []
    for f, em in zip(factors, ems):
        diverged = ref.diverged or em.diverged
        err = math.nan if diverged else strong_error_sup(ref, em, plan.q)
        cells.append({"x": f, "delta": em.delta, "rep": rep, "error": err, "diverged": diverged})
    return cells, time.perf_counter() - start


def run_timestep_sweep(plan: SweepPlan, workers: int = 1) -> SweepResult:
    """Strong error of the EM scheme against a fine reference, per step size.

    Per replication one Brownian grid drives the reference (step
    factor_ref * T / M) and every EM run, so all runs are synchronously
    coupled. Errors are compared at each EM run's own grid times.
    """
    plan.check("dt")
    out = _map(_timestep_rep, [(plan, r) for r in range(plan.R)], workers)
    cells = [c for rep_cells, _ in out for c in rep_cells]
    return SweepResult("dt", cells, [w for _, w in out])


def _chaos_rep(job) -> tuple[list, float]:
    plan, rep = job
    start = time.perf_counter()
    model = make_builtin_model(plan.family, plan.params)
    d = model.dim
    n_max = max(plan.N_list)
    x0 = _initial(plan, n_max, d, rep)
    grid, extra = _grids(plan, d, n_max, rep)
    ns = sorted(plan.N_list)
    ref_req = _reference_request(plan, x0, d, rep, plan.factor // plan.factor_ref)
    runs = [ref_req] + [RunRequest(plan.factor, x0[:n]) for n in ns]
    ref, *ems = simulate_coupled(model, grid, runs, extra)
    cells = []
    for n, em in zip(ns, ems):
        diverged = ref.diverged or em.diverged
        err = math.nan if diverged else strong_error_sup(ref.first(n), em, plan.q)
        cells.append({"x": n, "delta": em.delta, "rep": rep, "error": err, "diverged": diverged})
    return cells, time.perf_counter() - start


def run_chaos_sweep(plan: SweepPlan, workers: int = 1) -> SweepResult:
    """Error between N-particle systems and a large reference, per N.

    The reference has max(N_list) + n_extra particles; each N-system uses
    the first N of its initial atoms and noises, so particle i is coupled
    to the same reference particle for every N.
    """
    plan.check("N")
    out = _map(_chaos_rep, [(plan, r) for r in range(plan.R)], workers)
    cells = [c for rep_cells, _ in out for c in rep_cells]
    return SweepResult("N", cells, [w for _, w in out])


def _glivenko_rep(job) -> tuple[list, float]:
    law, d, n_list, p, seed, rep, n_proj = job
    start = time.perf_counter()
    n_max = max(n_list)
    sample = law.sample(n_max, d, seed, stream_id(STREAM_GC_SAMPLE, rep))
    truth_all = law.sample(TRUTH_MULTIPLE * n_max, d, seed, stream_id(STREAM_GC_TRUTH, rep))
    cells = []
    for n in sorted(n_list):
        emp = EmpiricalMeasure(sample[:n]).repeat(TRUTH_MULTIPLE)
        truth = EmpiricalMeasure(truth_all[: TRUTH_MULTIPLE * n])
        if d == 1:
            dist = wasserstein_1d(p, emp, truth)
        else:
            dist = wasserstein_sliced(emp, truth, n_proj=n_proj, seed=seed + rep, p=p)
        cells.append({"x": n, "delta": math.nan, "rep": rep, "error": dist, "diverged": False})
    return cells, time.perf_counter() - start


def run_glivenko_sweep(
    law: InitialLaw,
    N_list,
    replications: int,
    d: int = 1,
    p: float = 1.0,
    seed: int = DEFAULT_SEED,
    n_proj: int = 64,
    workers: int = 1,
) -> SweepResult:
    """Mean W_p between an N-sample and a 64N-sample of the same law.

    The N-atom empirical is written with each atom repeated 64 times so
    that both measures have equal atom counts; this leaves the measure
    unchanged. Exact in 1-D, sliced W_2 otherwise (``p`` must then be 2).
    """
    if replications < 1 or not N_list:
        raise ValueError("need R >= 1 and a nonempty N_list")
    if d > 1 and p != 2:
        raise ValueError("multi-dimensional Glivenko sweeps use sliced W_2 (p = 2)")
    jobs = [(law, d, tuple(N_list), p, seed, r, n_proj) for r in range(replications)]
    out = _map(_glivenko_rep, jobs, workers)
    cells = [c for rep_cells, _ in out for c in rep_cells]
    return SweepResult("glivenko", cells, [w for _, w in out])


def results_csv(result: SweepResult) -> str:
    """One row per cell; byte-stable for identical inputs."""
    buf = io.StringIO(newline="")
    buf.write("kind,x,delta,rep,error,diverged\n")
    for c in sorted(result.cells, key=lambda c: (c["x"], c["rep"])):
        buf.write(f"{result.kind},{c['x']},{float(c['delta'])!r},{c['rep']},{float(c['error'])!r},{int(c['diverged'])}\n")
    return buf.getvalue()
