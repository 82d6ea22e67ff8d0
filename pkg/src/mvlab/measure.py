"""Empirical measures and Wasserstein distances between them.

All measures here are equal-weight clouds of N atoms in R^d. Distances
follow the convention W_p = (inf E|X - Y|^p)^(1 / max(1, p)), and p < 1 is
rejected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "EmpiricalMeasure",
    "as_measure",
    "wasserstein_1d",
    "wasserstein_matching",
    "wasserstein_sliced",
    "coupling_upper_bound",
    "MATCHING_CAP",
]

MATCHING_CAP = 2048


@dataclass(frozen=True)
class EmpiricalMeasure:
    """N equally weighted atoms in R^d, stored as an (N, d) array."""

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2 or atoms.shape[0] < 1 or atoms.shape[1] < 1:
            raise ValueError(f"atoms must have shape (N, d) with N, d >= 1, got {atoms.shape}")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        atoms = atoms.copy()
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def shift(self, v) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.atoms + np.asarray(v, dtype=float))

    def scale(self, c: float) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.atoms * c)

    def repeat(self, k: int) -> EmpiricalMeasure:
        """Same measure written with every atom repeated k times."""
        return EmpiricalMeasure(np.repeat(self.atoms, k, axis=0))


def as_measure(x) -> EmpiricalMeasure:
    if isinstance(x, EmpiricalMeasure):
        return x
    return EmpiricalMeasure(x)


def _check_p(p: float) -> float:
    p = float(p)
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    return p


def _check_pair(a: EmpiricalMeasure, b: EmpiricalMeasure) -> None:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.n != b.n:
        raise ValueError(f"unequal atom counts: {a.n} vs {b.n}")


def _root(mean_cost: float, p: float) -> float:
    return float(mean_cost ** (1.0 / max(1.0, p)))


def wasserstein_1d(p: float, a, b) -> float:
    """Exact W_p between two 1-D empirical measures with equal atom counts.

    The monotone (sorted) coupling is optimal on the line for every p >= 1.
    """
    p = _check_p(p)
    a, b = as_measure(a), as_measure(b)
    if a.dim != 1 or b.dim != 1:
        raise ValueError("wasserstein_1d needs 1-dimensional measures")
    _check_pair(a, b)
    xs = np.sort(a.atoms[:, 0])
    ys = np.sort(b.atoms[:, 0])
    return _root(np.mean(np.abs(xs - ys) ** p), p)


def _cost_matrix(a: np.ndarray, b: np.ndarray, p: float) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)) ** p


def wasserstein_matching(p: float, a, b, cap: int = MATCHING_CAP) -> float:
    """Exact W_p via a minimum-cost perfect matching of the atoms.

    Between equal-weight clouds of the same size an optimal coupling can be
    taken to be a permutation, so this is the exact distance. Cost is
    O(N^3); clouds larger than ``cap`` should use :func:`wasserstein_sliced`.
    """
    p = _check_p(p)
    a, b = as_measure(a), as_measure(b)
    _check_pair(a, b)
    if a.n > cap:
        raise ValueError(f"N={a.n} exceeds matching cap {cap}; use wasserstein_sliced")
    cost = _cost_matrix(a.atoms, b.atoms, p)
    rows, cols = linear_sum_assignment(cost)
    return _root(cost[rows, cols].sum() / a.n, p)


def random_directions(dim: int, n_proj: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n_proj, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def wasserstein_sliced(a, b, n_proj: int = 64, seed: int = 0, p: float = 2) -> float:
    """Sliced W_2: root of the mean squared 1-D W_2 over random unit directions.

    Never exceeds the exact W_2, and equals it in one dimension.
    """
    if p != 2:
        raise ValueError("only p = 2 is supported for the sliced distance")
    if n_proj < 1:
        raise ValueError("n_proj must be >= 1")
    a, b = as_measure(a), as_measure(b)
    _check_pair(a, b)
    if a.dim == 1:
        return wasserstein_1d(2, a, b)
    u = random_directions(a.dim, n_proj, seed)
    pa = np.sort(a.atoms @ u.T, axis=0)
    pb = np.sort(b.atoms @ u.T, axis=0)
    per_direction = np.mean((pa - pb) ** 2, axis=0)
    return float(np.sqrt(per_direction.mean()))


def coupling_upper_bound(p: float, a, b) -> float:
    """Cost of the index-aligned (diagonal) coupling, an upper bound on W_p."""
    p = _check_p(p)
    a, b = as_measure(a), as_measure(b)
    _check_pair(a, b)
    diff = a.atoms - b.atoms
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return _root(np.mean(dist**p), p)
