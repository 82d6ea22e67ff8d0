"""Euler-Maruyama particle simulation with exactly coupled Brownian grids.

Noise layout
------------
A :class:`BrownianGrid` is never materialised in full. Its M fine steps are
cut into blocks of ``block_steps`` steps; block k is drawn from a Philox
stream with key (seed, stream) and counter (0, k, 0, 0), in particle-major
order. Hence

* any block can be regenerated on its own (counter-based),
* the first n particles of a grid are the same for every N >= n,
* nothing depends on how work is spread over processes.

Coarse increments are left folds ``((0 + dW_0) + dW_1) + ...`` of the fine
increments, a fixed summation order shared by every consumer.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .measure import EmpiricalMeasure, wasserstein_1d, wasserstein_matching, wasserstein_sliced
from .model import MeasureView, ModelSpec

__all__ = [
    "InitialLaw",
    "BrownianGrid",
    "CoarseIncrements",
    "ParticlePaths",
    "MeasureFlow",
    "generate_brownian_grid",
    "coarsen",
    "simulate_interacting_em",
    "simulate_reference",
    "simulate_coupled",
    "RunRequest",
    "picard_mean_field",
    "strong_error_sup",
    "time_increment_moments",
    "sup_moment",
    "read_paths_bin",
]

BLOCK_STEPS = 64
STEP_LIMIT = math.exp(-1)

# stream tags, combined with a replication index into the Philox key
STREAM_NOISE = 1
STREAM_EXTRA_NOISE = 2
STREAM_INITIAL = 3
STREAM_EXTRA_INITIAL = 4


def stream_id(tag: int, index: int = 0) -> int:
    return (int(tag) << 40) | int(index)


def _philox(seed: int, stream: int, block: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream) & 0xFFFFFFFFFFFFFFFF]
    return np.random.Generator(np.random.Philox(key=key, counter=[0, int(block), 0, 0]))


def _is_power_of_two(m: int) -> bool:
    return m >= 1 and (m & (m - 1)) == 0


# ---------------------------------------------------------------------------
# initial laws


@dataclass(frozen=True)
class InitialLaw:
    """i.i.d. initial condition: ``point`` (loc), ``uniform`` (low, high) or
    ``gaussian`` (mean, std). Parameters are scalars applied per component."""

    kind: str = "point"
    loc: float = 0.0
    low: float = 0.0
    high: float = 1.0
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.kind not in ("point", "uniform", "gaussian"):
            raise ValueError(f"unknown initial law {self.kind!r}")
        if self.kind == "uniform" and not self.high > self.low:
            raise ValueError("uniform law needs high > low")
        if self.kind == "gaussian" and self.std < 0:
            raise ValueError("gaussian law needs std >= 0")

    def sample(self, n: int, d: int, seed: int, stream: int = STREAM_INITIAL) -> np.ndarray:
        """Draw n atoms; atom i does not depend on n (prefix-stable)."""
        if self.kind == "point":
            return np.full((n, d), float(self.loc))
        rng = _philox(seed, stream, 0)
        if self.kind == "uniform":
            return self.low + (self.high - self.low) * rng.random((n, d))
        return self.mean + self.std * rng.standard_normal((n, d))


# ---------------------------------------------------------------------------
# Brownian grids


@dataclass(frozen=True)
class BrownianGrid:
    """Fine Gaussian increments dW ~ Normal(0, (T/M) I) for N particles."""

    dim: int
    n_particles: int
    horizon: float
    n_steps: int
    seed: int
    stream: int = stream_id(STREAM_NOISE)

    def __post_init__(self):
        if self.n_particles < 1 or self.dim < 1:
            raise ValueError("need N >= 1 and d >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not _is_power_of_two(self.n_steps):
            raise ValueError(f"M must be a power of two, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def block_steps(self) -> int:
        return min(BLOCK_STEPS, self.n_steps)

    @property
    def n_blocks(self) -> int:
        return self.n_steps // self.block_steps

    def block(self, k: int, n: int | None = None) -> np.ndarray:
        """Fine increments of block k for the first n particles, shape (n, B, d)."""
        n = self.n_particles if n is None else n
        b = self.block_steps
        z = _philox(self.seed, self.stream, k).standard_normal(n * b * self.dim)
        return z.reshape(n, b, self.dim) * math.sqrt(self.dt)

    def blocks(self, n: int | None = None) -> Iterator[np.ndarray]:
        for k in range(self.n_blocks):
            yield self.block(k, n)

    def increments(self, n: int | None = None) -> np.ndarray:
        """All fine increments, shape (n, M, d). Only for small grids."""
        return np.concatenate(list(self.blocks(n)), axis=1)

    def with_particles(self, n: int) -> BrownianGrid:
        return BrownianGrid(self.dim, n, self.horizon, self.n_steps, self.seed, self.stream)


def generate_brownian_grid(d: int, N: int, T: float, M: int, seed: int, stream: int | None = None) -> BrownianGrid:
    if stream is None:
        stream = stream_id(STREAM_NOISE)
    return BrownianGrid(d, N, T, M, seed, stream)


class _Folder:
    """Turns a stream of fine blocks into coarse increments by left folds."""

    def __init__(self, factor: int):
        self.factor = factor
        self.acc = None
        self.filled = 0

    def feed(self, fine: np.ndarray) -> np.ndarray:
        n, b, d = fine.shape
        f = self.factor
        if f <= b:
            out = fine[:, 0::f].copy()
            for j in range(1, f):
                out += fine[:, j::f]
            return out
        if self.acc is None:
            self.acc = np.zeros((n, d))
        for j in range(b):
            self.acc += fine[:, j]
        self.filled += b
        if self.filled < f:
            return fine[:, :0]
        out, self.acc, self.filled = self.acc[:, None, :], None, 0
        return out


class CoarseIncrements:
    """View of a grid's increments at step ``factor * T / M``."""

    def __init__(self, grid: BrownianGrid, factor: int, n: int | None = None):
        if factor < 1 or grid.n_steps % factor:
            raise ValueError(f"factor {factor} does not divide M={grid.n_steps}")
        self.grid = grid
        self.factor = factor
        self.n = grid.n_particles if n is None else n

    @property
    def dt(self) -> float:
        return self.factor * self.grid.dt

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps // self.factor

    def chunks(self) -> Iterator[np.ndarray]:
        folder = _Folder(self.factor)
        for fine in self.grid.blocks(self.n):
            out = folder.feed(fine)
            if out.shape[1]:
                yield out

    def as_array(self) -> np.ndarray:
        return np.concatenate(list(self.chunks()), axis=1)


def coarsen(grid: BrownianGrid, factor: int) -> CoarseIncrements:
    return CoarseIncrements(grid, factor)


# ---------------------------------------------------------------------------
# paths

_BIN_MAGIC = b"MVLP"
_BIN_VERSION = 1
_BIN_HEADER = struct.Struct("<4sIIQQdQ")


@dataclass
class ParticlePaths:
    """States of N particles at recorded times, shape (N, m + 1, d).

    ``delta`` is the scheme step; recorded times may be sparser than it.
    A diverged run keeps NaN after ``divergence_step`` (a scheme step index).
    """

    times: np.ndarray
    states: np.ndarray
    delta: float
    model_name: str = ""
    seed: int = 0
    divergence_step: int | None = None

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def diverged(self) -> bool:
        return self.divergence_step is not None

    def at(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[:, k])

    def first(self, n: int) -> ParticlePaths:
        return ParticlePaths(self.times, self.states[:n], self.delta, self.model_name, self.seed, self.divergence_step)

    def csv_lines(self) -> Iterator[str]:
        cols = ",".join(f"x{j}" for j in range(self.dim))
        yield f"t,particle,{cols}\n"
        for k, t in enumerate(self.times):
            tk = repr(float(t))
            for i in range(self.n):
                vals = ",".join(repr(float(v)) for v in self.states[i, k])
                yield f"{tk},{i},{vals}\n"

    def to_csv(self) -> str:
        return "".join(self.csv_lines())

    def to_bytes(self) -> bytes:
        """Binary dump: little-endian header (magic 'MVLP', u32 version,
        u32 d, u64 N, u64 m, f64 delta, u64 seed), u32 name length + UTF-8
        model name, then f64 times[m + 1] and f64 states[N, m + 1, d]."""
        name = self.model_name.encode()
        m = len(self.times) - 1
        head = _BIN_HEADER.pack(_BIN_MAGIC, _BIN_VERSION, self.dim, self.n, m, self.delta, self.seed)
        return b"".join(
            [
                head,
                struct.pack("<I", len(name)),
                name,
                np.ascontiguousarray(self.times, "<f8").tobytes(),
                np.ascontiguousarray(self.states, "<f8").tobytes(),
            ]
        )


def read_paths_bin(data: bytes) -> ParticlePaths:
    magic, version, d, n, m, delta, seed = _BIN_HEADER.unpack_from(data, 0)
    if magic != _BIN_MAGIC or version != _BIN_VERSION:
        raise ValueError("not a particle-path dump of a supported version")
    pos = _BIN_HEADER.size
    (name_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    name = data[pos : pos + name_len].decode()
    pos += name_len
    times = np.frombuffer(data, "<f8", m + 1, pos).copy()
    pos += 8 * (m + 1)
    states = np.frombuffer(data, "<f8", n * (m + 1) * d, pos).reshape(n, m + 1, d).copy()
    div = None
    bad = ~np.isfinite(states).all(axis=(0, 2))
    if bad.any():
        div = int(np.argmax(bad))
    return ParticlePaths(times, states, delta, name, seed, div)


@dataclass
class MeasureFlow:
    times: np.ndarray
    states: np.ndarray  # (N, m + 1, d)

    def __len__(self) -> int:
        return len(self.times)

    def at(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[:, k])


# ---------------------------------------------------------------------------
# Euler-Maruyama


@dataclass
class RunRequest:
    """One EM run fed by a shared noise source.

    The run uses the first ``n`` particles of the source. With ``frozen``
    set, the drift sees that flow (indexed by scheme step) instead of the
    run's own empirical measure, and particles do not interact.
    """

    factor: int
    x0: np.ndarray
    record_every: int = 1
    frozen: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.x0.shape[0]


def _em_step(model: ModelSpec, x: np.ndarray, atoms: np.ndarray, dt: float, dw: np.ndarray) -> np.ndarray:
    m = MeasureView(atoms)
    drift = model.b1(x, m) + model.b2(x, m)
    sig = model.sigma(x)
    if x.shape[1] == 1:
        noise = sig * dw
    else:
        noise = np.einsum("nij,nj->ni", sig, dw)
    return x + drift * dt + noise


class _Run:
    def __init__(self, req: RunRequest, model: ModelSpec, fine_dt: float, n_fine: int):
        if n_fine % req.factor:
            raise ValueError(f"factor {req.factor} does not divide M={n_fine}")
        n_steps = n_fine // req.factor
        if req.record_every < 1 or n_steps % req.record_every:
            raise ValueError("record_every must divide the number of scheme steps")
        self.req, self.model = req, model
        self.dt = req.factor * fine_dt
        self.n_steps = n_steps
        self.folder = _Folder(req.factor)
        self.x = np.array(req.x0, dtype=float)
        n_rec = n_steps // req.record_every + 1
        self.states = np.full((req.n, n_rec, self.x.shape[1]), np.nan)
        self.states[:, 0] = self.x
        self.k = 0
        self.divergence_step = None
        if not np.all(np.isfinite(self.x)):
            self.divergence_step = 0

    def advance(self, fine: np.ndarray) -> None:
        coarse = self.folder.feed(fine[: self.req.n])
        if self.divergence_step is not None:
            return
        frozen, every = self.req.frozen, self.req.record_every
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(coarse.shape[1]):
                atoms = self.x if frozen is None else frozen[:, self.k]
                self.x = _em_step(self.model, self.x, atoms, self.dt, coarse[:, j])
                self.k += 1
                if not np.isfinite(self.x).all():
                    self.divergence_step = self.k
                    return
                if self.k % every == 0:
                    self.states[:, self.k // every] = self.x

    def paths(self, seed: int) -> ParticlePaths:
        every = self.req.record_every
        times = self.dt * every * np.arange(self.states.shape[1])
        return ParticlePaths(times, self.states, self.dt, self.model.name, seed, self.divergence_step)


def _warn_step(dt: float) -> None:
    if dt >= STEP_LIMIT:
        warnings.warn(f"step {dt:.4g} is not below 1/e", RuntimeWarning, stacklevel=3)


def simulate_coupled(
    model: ModelSpec,
    grid: BrownianGrid,
    runs: Sequence[RunRequest],
    extra: BrownianGrid | None = None,
) -> list[ParticlePaths]:
    """Advance several EM runs in lockstep over one pass of the noise.

    Noise for particle i < grid.n_particles comes from ``grid``; particles
    beyond that come from ``extra`` (same d, T, M). Every run is bitwise
    identical to running it alone.
    """
    n_main = grid.n_particles
    n_extra = 0 if extra is None else extra.n_particles
    if extra is not None and (extra.dim, extra.n_steps, extra.horizon) != (grid.dim, grid.n_steps, grid.horizon):
        raise ValueError("extra grid must share d, M and T with the main grid")
    need = max(r.n for r in runs)
    if need > n_main + n_extra:
        raise ValueError(f"runs need {need} particles, noise has {n_main + n_extra}")
    for r in runs:
        if r.x0.ndim != 2 or r.x0.shape[1] != grid.dim:
            raise ValueError(f"x0 must have shape (n, {grid.dim})")
    active = [_Run(r, model, grid.dt, grid.n_steps) for r in runs]
    for a in active:
        _warn_step(a.dt)
    take_main = min(need, n_main)
    take_extra = need - take_main
    for k in range(grid.n_blocks):
        fine = grid.block(k, take_main)
        if take_extra:
            fine = np.concatenate([fine, extra.block(k, take_extra)], axis=0)
        for a in active:
            a.advance(fine)
    return [a.paths(grid.seed) for a in active]


def simulate_interacting_em(
    model: ModelSpec, grid: BrownianGrid, factor: int, x0, record_every: int = 1
) -> ParticlePaths:
    """Interacting-particle EM scheme at step factor * T / M.

    Every step forms the empirical measure of the current states and moves
    all particles with it: X <- X + b(X, mu) dt + sigma(X) dW.
    """
    x0 = _as_atoms(x0, grid.dim)
    if x0.shape[0] != grid.n_particles:
        raise ValueError(f"x0 has {x0.shape[0]} atoms, grid has {grid.n_particles} particles")
    return simulate_coupled(model, grid, [RunRequest(factor, x0, record_every)])[0]


def simulate_reference(
    model: ModelSpec,
    grid: BrownianGrid,
    n_extra: int,
    factor_ref: int,
    seed_extra: int,
    x0,
    x0_extra=None,
    record_every: int = 1,
) -> ParticlePaths:
    """Fine-step run with N + n_extra interacting particles; returns the first N.

    The first N particles reuse ``grid``'s noise, the extras draw from an
    independent grid seeded by ``seed_extra``. It stands in for the
    non-interacting limit particles with matched noise.
    """
    x0 = _as_atoms(x0, grid.dim)
    if n_extra < 0:
        raise ValueError("n_extra must be >= 0")
    extra = None
    if n_extra:
        if x0_extra is None:
            raise ValueError("x0_extra is required when n_extra > 0")
        x0_extra = _as_atoms(x0_extra, grid.dim)
        if x0_extra.shape[0] != n_extra:
            raise ValueError("x0_extra must have n_extra atoms")
        extra = BrownianGrid(grid.dim, n_extra, grid.horizon, grid.n_steps, seed_extra, stream_id(STREAM_EXTRA_NOISE))
        x0 = np.concatenate([x0, x0_extra])
    run = RunRequest(factor_ref, x0, record_every)
    return simulate_coupled(model, grid, [run], extra)[0].first(grid.n_particles)


def _as_atoms(x0, d: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1 and d == 1:
        x0 = x0[:, None]
    if x0.ndim != 2 or x0.shape[1] != d:
        raise ValueError(f"initial atoms must have shape (N, {d})")
    return x0


# ---------------------------------------------------------------------------
# distribution iteration


def flow_distance(a: np.ndarray, b: np.ndarray) -> float:
    """sup over times of W1 between two flows of shape (N, m + 1, d).

    Exact in 1-D and for d > 1 with N <= 256 (assignment); sliced W2 above
    that, which bounds W1 from neither side but tracks it.
    """
    n, m1, d = a.shape
    if d == 1:
        return float(np.max(np.mean(np.abs(np.sort(a[:, :, 0], axis=0) - np.sort(b[:, :, 0], axis=0)), axis=0)))
    if n <= 256:
        return max(wasserstein_matching(1, a[:, k], b[:, k]) for k in range(m1))
    return max(wasserstein_sliced(a[:, k], b[:, k], n_proj=32, seed=k) for k in range(m1))


def picard_mean_field(
    model: ModelSpec, N: int, grid: BrownianGrid, factor: int, k_max: int, x0
) -> tuple[list[MeasureFlow], list[float]]:
    """Distribution iteration with frozen empirical flows.

    Iterate k moves N independent particles with drift b(x, mu^(k-1)_t)
    where mu^(k-1) is the previous iterate's empirical flow, using the same
    Brownian grid every time. The start flow is constant at x0's empirical
    measure. Returns the flows mu^(0..k_max) and d_k = sup_t W1(mu^(k), mu^(k-1)).
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    x0 = _as_atoms(x0, grid.dim)
    if x0.shape[0] != N or grid.n_particles < N:
        raise ValueError("x0 must have N atoms and the grid at least N particles")
    n_steps = grid.n_steps // factor
    times = factor * grid.dt * np.arange(n_steps + 1)
    prev = np.repeat(x0[:, None, :], n_steps + 1, axis=1)
    flows = [MeasureFlow(times, prev)]
    dists = []
    for _ in range(k_max):
        paths = simulate_coupled(model, grid, [RunRequest(factor, x0, 1, frozen=prev)])[0]
        if paths.diverged:
            raise FloatingPointError(f"Picard iterate diverged at step {paths.divergence_step}")
        dists.append(flow_distance(paths.states, prev))
        prev = paths.states
        flows.append(MeasureFlow(times, prev))
    return flows, dists


# ---------------------------------------------------------------------------
# error functionals


def _common_indices(fine: ParticlePaths, coarse: ParticlePaths) -> np.ndarray:
    step = fine.times[1] - fine.times[0] if len(fine.times) > 1 else 1.0
    idx = np.rint(coarse.times / step).astype(int)
    if idx.max() >= len(fine.times) or not np.allclose(fine.times[idx], coarse.times, rtol=0, atol=1e-9 * max(1.0, fine.horizon)):
        raise ValueError("the first path set's times must contain the second's")
    return idx


def strong_error_sup(a: ParticlePaths, b: ParticlePaths, q: float = 2.0) -> float:
    """(1/N) sum_i max_k |X^a_i(t_k) - X^b_i(t_k)|^q over b's recorded times."""
    if q <= 0:
        raise ValueError("q must be positive")
    if a.n != b.n or a.dim != b.dim:
        raise ValueError("paths must have the same N and d")
    if not math.isclose(a.horizon, b.horizon, rel_tol=1e-12):
        raise ValueError("paths must share the horizon")
    idx = _common_indices(a, b)
    diff = a.states[:, idx] - b.states
    dist = np.sqrt(np.einsum("nkd,nkd->nk", diff, diff))
    return float(np.mean(np.max(dist, axis=1) ** q))


def time_increment_moments(paths: ParticlePaths, q: float = 2.0) -> float:
    """Mean of |X_{k+1} - X_k|^q over particles and recorded steps."""
    inc = np.diff(paths.states, axis=1)
    return float(np.mean(np.linalg.norm(inc, axis=2) ** q))


def sup_moment(paths: ParticlePaths, p: float = 2.0) -> float:
    """(1/N) sum_i max_k |X_i(t_k)|^p."""
    return float(np.mean(np.max(np.linalg.norm(paths.states, axis=2), axis=1) ** p))
