"""Acceptance suite: fixed-seed convergence and invariant criteria.

Each criterion returns measured values, the tolerances it used and a
pass flag. ``budget="full"`` runs the stated problem sizes, ``"quick"`` a
reduced version for smoke testing. Tolerances can be overridden per
criterion (``tolerance_overrides``), which is how forced failures are
produced.
"""

from __future__ import annotations

import itertools
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .engine import InitialLaw, generate_brownian_grid, picard_mean_field, simulate_interacting_em
from .experiments import (
    DEFAULT_SEED,
    SweepPlan,
    oracle_linear_gaussian,
    run_chaos_sweep,
    run_glivenko_sweep,
    run_timestep_sweep,
)
from .measure import coupling_upper_bound, wasserstein_1d, wasserstein_matching
from .model import make_builtin_model
from .yamada import check_invariants, make_smoothing

SCHEMA_VERSION = 1
BUDGETS = ("full", "quick")

HOLDER_DIFFUSION = {"kappa": 1.0, "S": 10.0, "lambda": 1.0, "beta": 1.0, "K1": 0.5, "B": 1e3}
LINEAR_MF = {"a": -1.0, "c": 0.5, "s": 1.0}
STANDARD_NORMAL = InitialLaw("gaussian", mean=0.0, std=1.0)
ORACLE_INITIAL = InitialLaw("gaussian", mean=1.0, std=0.5)


@dataclass
class Criterion:
    name: str
    description: str
    tolerance: dict
    run: Callable  # (budget, seed, workers, tol) -> (passed, measured)


def _timestep_plan(alpha: float, budget: str, seed: int) -> SweepPlan:
    params = dict(HOLDER_DIFFUSION, alpha=alpha)
    if budget == "full":
        sizes = dict(M=2**14, N=4096, R=16, factor_list=tuple(2**k for k in range(5, 11)), factor_ref=4)
    else:
        sizes = dict(M=2**11, N=512, R=4, factor_list=tuple(2**k for k in range(3, 8)), factor_ref=1)
    return SweepPlan("holder_diffusion_1d", params, STANDARD_NORMAL, T=1.0, seed=seed, q=2.0, **sizes)


def _medians_by_delta(res):
    # summary rows and per_rep columns are both ordered by factor, i.e. by delta
    rows = res.summary()
    med = np.nanmedian(res.per_rep(), axis=0)
    return [r["delta"] for r in rows], [r["mean"] for r in rows], med


def _c01(budget, seed, workers, tol):
    res = run_timestep_sweep(_timestep_plan(1.0, budget, seed), workers)
    fit = res.fit("delta")
    deltas, means, _ = _medians_by_delta(res)
    passed = tol["slope_min"] <= fit.slope <= tol["slope_max"]
    return passed, {"slope": fit.slope, "r_squared": fit.r_squared, "deltas": deltas, "mean_errors": means}


def _c02(budget, seed, workers, tol):
    res = run_timestep_sweep(_timestep_plan(0.75, budget, seed), workers)
    fit = res.fit("delta")
    deltas, means, med = _medians_by_delta(res)
    monotone = bool(np.all(np.diff(med) >= 0))
    passed = monotone and fit.slope >= tol["slope_min"]
    return passed, {
        "slope": fit.slope,
        "median_monotone": monotone,
        "deltas": deltas,
        "median_errors": med.tolist(),
        "mean_errors": means,
    }


def _c03(budget, seed, workers, tol):
    res = run_timestep_sweep(_timestep_plan(0.5, budget, seed), workers)
    fit = res.fit("delta")
    deltas, means, med = _medians_by_delta(res)
    strict = bool(np.all(np.diff(med) > 0))
    return strict, {
        "strictly_decreasing_with_delta": strict,
        "slope_reported_only": fit.slope,
        "deltas": deltas,
        "median_errors": med.tolist(),
        "mean_errors": means,
    }


def _c04(budget, seed, workers, tol):
    top = 12 if budget == "full" else 10
    plan = SweepPlan(
        "linear_mf",
        LINEAR_MF,
        ORACLE_INITIAL,
        T=1.0,
        M=2**10,
        R=8 if budget == "full" else 4,
        seed=seed,
        N_list=tuple(2**k for k in range(6, top + 1)),
        factor=4,
        factor_ref=4,
        n_extra=3 * 2**top,
        q=2.0,
    )
    res = run_chaos_sweep(plan, workers)
    fit = res.fit()
    return fit.slope <= tol["slope_max"], {
        "slope": fit.slope,
        "r_squared": fit.r_squared,
        "N": res.values,
        "mean_errors": [r["mean"] for r in res.summary()],
    }


def _c05(budget, seed, workers, tol):
    top = 10 if budget == "full" else 9
    plan = SweepPlan(
        "bounded_holder_multid",
        {"d": 5, "alpha": 0.5, "A": 1.0, "c": 0.5, "eps": 0.3},
        STANDARD_NORMAL,
        T=1.0,
        M=2**10 if budget == "full" else 2**8,
        R=4 if budget == "full" else 2,
        seed=seed,
        N_list=tuple(2**k for k in range(6, top + 1)),
        factor=4,
        factor_ref=4,
        n_extra=3 * 2**top,
        q=2.0,
    )
    res = run_chaos_sweep(plan, workers)
    fit = res.fit()
    return fit.slope <= tol["slope_max"], {
        "slope": fit.slope,
        "r_squared": fit.r_squared,
        "N": res.values,
        "mean_errors": [r["mean"] for r in res.summary()],
    }


def _c06(budget, seed, workers, tol):
    n = 10**4 if budget == "full" else 2000
    M = 2**10
    model = make_builtin_model("linear_mf", LINEAR_MF)
    x0 = ORACLE_INITIAL.sample(n, 1, seed)
    grid = generate_brownian_grid(1, n, 1.0, M, seed)
    paths = simulate_interacting_em(model, grid, 1, x0, record_every=M)
    xt = paths.states[:, -1, 0]
    m_t, v_t = oracle_linear_gaussian(-1.0, 0.5, 1.0, ORACLE_INITIAL.mean, ORACLE_INITIAL.std**2, 1.0)
    mean, sd, var = float(xt.mean()), float(xt.std(ddof=1)), float(xt.var(ddof=1))
    mean_err, var_rel = abs(mean - m_t), abs(var - v_t) / v_t
    mean_tol = tol["mean_sigmas"] * sd / math.sqrt(n)
    passed = mean_err <= mean_tol and var_rel <= tol["var_rel"]
    return passed, {
        "sample_mean": mean,
        "oracle_mean": m_t,
        "mean_error": mean_err,
        "mean_bound": mean_tol,
        "sample_variance": var,
        "oracle_variance": v_t,
        "variance_rel_error": var_rel,
    }


def _c07(budget, seed, workers, tol):
    R = 32 if budget == "full" else 8
    res = run_glivenko_sweep(
        InitialLaw("uniform", low=0.0, high=1.0), [2**k for k in range(5, 13)], R, d=1, p=1.0, seed=seed, workers=workers
    )
    fit = res.fit()
    return fit.slope <= tol["slope_max"], {"slope": fit.slope, "r_squared": fit.r_squared}


def _c08(budget, seed, workers, tol):
    n = 2048 if budget == "full" else 512
    model = make_builtin_model("linear_mf", LINEAR_MF)
    grid = generate_brownian_grid(1, n, 1.0, 2**8, seed)
    x0 = ORACLE_INITIAL.sample(n, 1, seed)
    _, d = picard_mean_field(model, n, grid, 1, 8, x0)
    ratios = [d[k + 1] / d[k] for k in range(1, len(d) - 1)]  # d_{k+1}/d_k for k >= 2
    overall = d[7] / d[1]
    passed = all(r < 1 for r in ratios) and overall < tol["d8_over_d2_max"]
    return passed, {"distances": d, "ratios_k_ge_2": ratios, "d8_over_d2": overall}


def _c09(budget, seed, workers, tol):
    results = {}
    ok = True
    for lg in (1, 2, 10):
        for eps in (0.5, 0.1, 0.01):
            checks = check_invariants(make_smoothing(math.exp(lg), eps), 1000, tol["tol"], tol["fd_tol"])
            worst = {k: v[0] for k, v in checks.items()}
            failed = [k for k, v in checks.items() if not v[1]]
            ok &= not failed
            results[f"gamma=e^{lg},eps={eps}"] = {"failed": failed, "worst": worst}
    return ok, results


def _brute_force(p, a, b):
    n = len(a)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        diff = a - b[list(perm)]
        best = min(best, float(np.mean(np.sqrt(np.sum(diff**2, axis=1)) ** p)))
    return best ** (1.0 / p)


def _c10(budget, seed, workers, tol):
    rng = np.random.default_rng(seed)
    n_inst = 200 if budget == "full" else 50
    worst_match, worst_1d, dominance_fail = 0.0, 0.0, 0
    for _ in range(n_inst):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        p = float(rng.choice([1.0, 2.0]))
        a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d)) + rng.normal(size=d)
        exact = wasserstein_matching(p, a, b)
        worst_match = max(worst_match, abs(exact - _brute_force(p, a, b)))
        if d == 1:
            worst_1d = max(worst_1d, abs(exact - wasserstein_1d(p, a, b)))
        if coupling_upper_bound(p, a, b) < exact - tol["tol"]:
            dominance_fail += 1
    passed = worst_match <= tol["tol"] and worst_1d <= tol["tol"] and dominance_fail == 0
    return passed, {
        "instances": n_inst,
        "max_abs_diff_bruteforce": worst_match,
        "max_abs_diff_1d": worst_1d,
        "dominance_failures": dominance_fail,
    }


def _c11(budget, seed, workers, tol):
    from .cli import main

    args = ["--model", "holder_diffusion_1d", "--N", "64", "--M", "256", "--T", "1", "--R", "3"]
    args += ["--factors", "4,8,16", "--factor-ref", "1", "--seed", str(seed), "--no-svg"]
    blobs = []
    with tempfile.TemporaryDirectory() as tmp:
        for w in (1, 8):
            out = Path(tmp) / f"w{w}"
            status = main(["sweep-dt", *args, "--workers", str(w), "--out", str(out)])
            if status != 0:
                return False, {"exit_status": status}
            blobs.append((out / "results.csv").read_bytes())
    same = blobs[0] == blobs[1]
    return same, {"byte_identical": same, "bytes": len(blobs[0])}


CRITERIA = [
    Criterion("c01_lipschitz_timestep_rate", "alpha=1: fitted slope of E sup|Z|^2 vs delta in [0.7, 1.6]",
              {"slope_min": 0.7, "slope_max": 1.6}, _c01),
    Criterion("c02_holder_diffusion_trend", "alpha=3/4: median error monotone in delta and slope >= 0.3",
              {"slope_min": 0.3}, _c02),
    Criterion("c03_half_holder_monotone", "alpha=1/2: median error strictly decreasing as delta shrinks",
              {}, _c03),
    Criterion("c04_chaos_1d", "linear_mf: slope of E sup|Z|^2 vs N <= -0.2",
              {"slope_max": -0.2}, _c04),
    Criterion("c05_chaos_multid", "bounded_holder_multid d=5: slope vs N <= -0.15",
              {"slope_max": -0.15}, _c05),
    Criterion("c06_closed_form_oracle", "linear_mf mean within 5 SE and variance within 10% of closed form",
              {"mean_sigmas": 5.0, "var_rel": 0.10}, _c06),
    Criterion("c07_glivenko_decay", "uniform[0,1] W1 slope vs N <= -0.25",
              {"slope_max": -0.25}, _c07),
    Criterion("c08_picard_contraction", "d_{k+1}/d_k < 1 for k >= 2 and d_8/d_2 < 0.1",
              {"d8_over_d2_max": 0.1}, _c08),
    Criterion("c09_yamada_invariants", "smoothing bounds, support, mass and finite differences",
              {"tol": 1e-8, "fd_tol": 1e-6}, _c09),
    Criterion("c10_ot_exactness", "assignment W_p equals brute force and 1-D formula; diagonal coupling dominates",
              {"tol": 1e-12}, _c10),
    Criterion("c11_determinism", "sweep-dt results.csv identical for workers=1 and workers=8",
              {}, _c11),
]


def criterion_names() -> list[str]:
    return [c.name for c in CRITERIA]


def run_criterion(name: str, budget: str = "full", seed: int = DEFAULT_SEED, workers: int = 1, tolerance=None) -> dict:
    crit = next((c for c in CRITERIA if c.name == name), None)
    if crit is None:
        raise KeyError(f"unknown criterion {name!r}")
    tol = dict(crit.tolerance)
    tol.update(tolerance or {})
    start = time.perf_counter()
    passed, measured = crit.run(budget, seed, workers, tol)
    return {
        "name": crit.name,
        "description": crit.description,
        "passed": bool(passed),
        "measured": measured,
        "tolerance": tol,
        "seed": seed,
        "budget": budget,
        "wall_time_s": round(time.perf_counter() - start, 3),
    }


def run_acceptance_suite(config: dict | None = None, log=print) -> dict:
    """Run the criteria named in ``config['only']`` (default: all).

    Config keys: budget ("full" | "quick"), seed, workers, only,
    tolerance_overrides ({criterion: {key: value}}).
    """
    config = dict(config or {})
    budget = config.get("budget", "full")
    if budget not in BUDGETS:
        raise ValueError(f"budget must be one of {BUDGETS}")
    seed = int(config.get("seed", DEFAULT_SEED))
    workers = int(config.get("workers", 1))
    names = config.get("only") or criterion_names()
    overrides = config.get("tolerance_overrides") or {}
    entries = []
    for name in names:
        entry = run_criterion(name, budget, seed, workers, overrides.get(name))
        entries.append(entry)
        if log:
            log(f"{'PASS' if entry['passed'] else 'FAIL'} {name} ({entry['wall_time_s']:.1f}s)")
    return {
        "schema_version": SCHEMA_VERSION,
        "budget": budget,
        "seed": seed,
        "passed": all(e["passed"] for e in entries),
        "criteria": entries,
    }
