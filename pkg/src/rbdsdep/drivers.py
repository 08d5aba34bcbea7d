"""Time grids, jump marks and driving-noise scenarios.

The solvers consume two independent Brownian motions W (forward, dimension
d) and B (a scalar motion whose integrals are taken in the backward sense),
plus a finite-activity marked Poisson stream.  Scenarios come in two modes:

``gaussian``
    dW and dB increments are Normal(0, dt); per-mark jump counts are
    Poisson(lambda_k * dt).

``two-point``
    every dW component and dB take the values +-sqrt(dt) with probability
    1/2, and each mark fires at most once per step with probability
    lambda_k * dt.  This is an exact finite probability space, the same one
    the enumeration tree uses, not an approximation of the gaussian mode.

Path generation is counter-seeded: path p of a set with seed s draws from
``np.random.default_rng((s, p))``, so regeneration is bit-identical and
independent of path order, chunking or thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, SolverError

MODES = ("gaussian", "two-point")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T] into N steps."""

    T: float
    N: int
    dt: float = field(init=False)
    times: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.T > 0.0:
            raise ConfigError(f"horizon T must be positive, got {self.T}")
        if not (isinstance(self.N, (int, np.integer)) and self.N >= 1):
            raise ConfigError(f"step count N must be an integer >= 1, got {self.N}")
        dt = self.T / self.N
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "times", _freeze(np.linspace(0.0, self.T, self.N + 1)))
        if abs(dt * self.N - self.T) > 1e-12 * max(1.0, abs(self.T)):
            raise ConfigError("grid does not reproduce T: dt * N != T")


def build_time_grid(T: float, N: int) -> TimeGrid:
    return TimeGrid(float(T), int(N))


@dataclass(frozen=True)
class MarkSpace:
    """Finite set of jump marks e_k with intensities lambda_k > 0.

    An empty mark space (m = 0) is legal and means no jump part.
    """

    values: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        lam = np.atleast_1d(np.asarray(self.intensities, dtype=float))
        if values.size == 0:
            values = values.reshape(0)
            lam = lam.reshape(0)
        if values.shape != lam.shape or values.ndim != 1:
            raise ConfigError("mark values and intensities must be 1-d and equal length")
        if np.any(values == 0.0):
            raise ConfigError("mark values must be nonzero")
        if np.any(lam <= 0.0):
            raise ConfigError("mark intensities must be positive")
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "intensities", _freeze(lam))

    @property
    def m(self) -> int:
        return self.values.size

    @property
    def total_intensity(self) -> float:
        return float(self.intensities.sum())

    def weighted_norm(self, u: np.ndarray) -> np.ndarray:
        """sqrt(sum_k lambda_k * u_k^2) along the last axis."""
        u = np.asarray(u, dtype=float)
        return np.sqrt((self.intensities * u * u).sum(axis=-1))


def empty_marks() -> MarkSpace:
    return MarkSpace(np.zeros(0), np.zeros(0))


def compensator_increments(marks: MarkSpace, grid: TimeGrid) -> np.ndarray:
    """Per-step compensator lambda_k * dt for each mark, shape (m,)."""
    return marks.intensities * grid.dt


@dataclass(frozen=True)
class ScenarioSet:
    """A batch of driving-noise paths on a common grid.

    dW has shape (P, N, d), dB has shape (P, N), jump_counts has shape
    (P, N, m).  ``weights`` holds per-path probabilities for exhaustively
    enumerated sets and is None for sampled sets (uniform 1/P).  Arrays are
    frozen; treat instances as immutable values.
    """

    grid: TimeGrid
    dim_d: int
    mode: str
    seed: Optional[int]
    dW: np.ndarray
    dB: np.ndarray
    jump_counts: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        P = self.dW.shape[0]
        N = self.grid.N
        if self.dW.shape != (P, N, self.dim_d):
            raise SolverError(f"dW shape {self.dW.shape} != {(P, N, self.dim_d)}")
        if self.dB.shape != (P, N):
            raise SolverError(f"dB shape {self.dB.shape} != {(P, N)}")
        if self.jump_counts.shape[:2] != (P, N):
            raise SolverError(f"jump_counts shape {self.jump_counts.shape} is not (P, N, m)")
        if self.weights is not None and self.weights.shape != (P,):
            raise SolverError("weights must have one entry per path")
        for arr in (self.dW, self.dB, self.jump_counts):
            _freeze(arr)
        if self.weights is not None:
            _freeze(self.weights)

    @property
    def path_count(self) -> int:
        return self.dW.shape[0]

    @property
    def num_marks(self) -> int:
        return self.jump_counts.shape[2]

    def path_weights(self) -> np.ndarray:
        if self.weights is not None:
            return self.weights
        P = self.path_count
        return np.full(P, 1.0 / P)

    def brownian_paths(self) -> np.ndarray:
        """Cumulative W, shape (P, N+1, d), W_0 = 0."""
        P, N, d = self.dW.shape
        out = np.zeros((P, N + 1, d))
        np.cumsum(self.dW, axis=1, out=out[:, 1:, :])
        return out

    def jump_paths(self) -> np.ndarray:
        """Cumulative jump counts, shape (P, N+1, m), zero at t = 0."""
        P, N, m = self.jump_counts.shape
        out = np.zeros((P, N + 1, m))
        np.cumsum(self.jump_counts, axis=1, out=out[:, 1:, :])
        return out

    def b_remaining(self) -> np.ndarray:
        """B_T - B_{t_i} per path, shape (P, N+1); zero at t = T."""
        P, N = self.dB.shape
        out = np.zeros((P, N + 1))
        out[:, :N] = self.dB[:, ::-1].cumsum(axis=1)[:, ::-1]
        return out


def simulate_scenarios(
    grid: TimeGrid,
    dim_d: int,
    marks: MarkSpace,
    path_count: int,
    seed: int,
    mode: str = "gaussian",
) -> ScenarioSet:
    """Sample driving-noise paths; see the module docstring for the modes."""
    if dim_d < 1:
        raise ConfigError(f"dim_d must be >= 1, got {dim_d}")
    if path_count < 1:
        raise ConfigError(f"path_count must be >= 1, got {path_count}")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    N, dt = grid.N, grid.dt
    m = marks.m
    if mode == "two-point" and marks.total_intensity * dt >= 1.0:
        raise ConfigError(
            "two-point mode needs total_intensity * dt < 1, got "
            f"{marks.total_intensity * dt:.6g}"
        )
    dW = np.empty((path_count, N, dim_d))
    dB = np.empty((path_count, N))
    counts = np.empty((path_count, N, m))
    root = np.sqrt(dt)
    lam_dt = marks.intensities * dt
    for p in range(path_count):
        rng = np.random.default_rng((seed, p))
        if mode == "gaussian":
            dW[p] = rng.standard_normal((N, dim_d)) * root
            dB[p] = rng.standard_normal(N) * root
            counts[p] = rng.poisson(lam_dt, (N, m))
        else:
            dW[p] = (1 - 2 * rng.integers(0, 2, (N, dim_d))) * root
            dB[p] = (1 - 2 * rng.integers(0, 2, N)) * root
            counts[p] = rng.random((N, m)) < lam_dt
    return ScenarioSet(grid, dim_d, mode, seed, dW, dB, counts)


def _sign_patterns(num_vars: int) -> np.ndarray:
    """All sign patterns, shape (2**k, k); first variable is the high bit,
    bit 0 means +1."""
    idx = np.arange(2**num_vars)
    shifts = num_vars - 1 - np.arange(num_vars)
    bits = (idx[:, None] >> shifts[None, :]) & 1
    return 1.0 - 2.0 * bits


def _jump_patterns(num_marks: int) -> np.ndarray:
    """All fire/no-fire patterns, shape (2**m, m); first mark is the high bit."""
    idx = np.arange(2**num_marks)
    shifts = num_marks - 1 - np.arange(num_marks)
    return ((idx[:, None] >> shifts[None, :]) & 1).astype(float)


def _jump_pattern_probs(marks: MarkSpace, dt: float) -> np.ndarray:
    """Probability of each fire pattern under per-mark Bernoulli(lambda*dt)."""
    patterns = _jump_patterns(marks.m)
    p = marks.intensities * dt
    probs = np.where(patterns > 0, p, 1.0 - p)
    return probs.prod(axis=1)


def enumerate_scenarios(
    grid: TimeGrid,
    dim_d: int,
    marks: MarkSpace,
    max_paths: int = 2_000_000,
) -> ScenarioSet:
    """Every two-point branch as one weighted path.

    The returned set has (2**d * 2 * 2**m)**N paths whose weights are the
    exact branch probabilities; LSMC run on it with the saturated indicator
    basis reproduces the enumeration-tree solve identically.
    """
    if dim_d < 1:
        raise ConfigError(f"dim_d must be >= 1, got {dim_d}")
    N, dt = grid.N, grid.dt
    m = marks.m
    if marks.total_intensity * dt >= 1.0:
        raise ConfigError(
            "two-point enumeration needs total_intensity * dt < 1, got "
            f"{marks.total_intensity * dt:.6g}"
        )
    per_step = 2 ** (dim_d + 1 + m)
    total = per_step**N
    if total > max_paths:
        raise SolverError(
            f"enumeration would produce {total} paths (> budget {max_paths})"
        )
    root = np.sqrt(dt)
    w_step = _sign_patterns(dim_d) * root        # (2^d, d)
    j_step = _jump_patterns(m)                   # (2^m, m)
    j_probs = _jump_pattern_probs(marks, dt)     # (2^m,)

    nw, nj, nb = 2**dim_d, 2**m, 2
    dW = np.empty((total, N, dim_d))
    dB = np.empty((total, N))
    counts = np.empty((total, N, m))
    weights = np.full(total, (1.0 / nw) ** N * 0.5**N)
    path = np.arange(total)
    # digit order: step 0 is the most significant digit of each index family
    wh = path // (nj**N * nb**N)
    jh = (path // nb**N) % nj**N
    bh = path % nb**N
    for i in range(N):
        w_digit = (wh // nw ** (N - 1 - i)) % nw
        j_digit = (jh // nj ** (N - 1 - i)) % nj
        b_digit = (bh // nb ** (N - 1 - i)) % nb
        dW[:, i, :] = w_step[w_digit]
        counts[:, i, :] = j_step[j_digit]
        dB[:, i] = (1.0 - 2.0 * b_digit) * root
        weights *= j_probs[j_digit]
    return ScenarioSet(grid, dim_d, "two-point", None, dW, dB, counts, weights)


def scenario_csv_rows(scen: ScenarioSet):
    """Header plus one row per path-step for CSV export."""
    d, m = scen.dim_d, scen.num_marks
    header = (
        ["path", "step"]
        + [f"dw{c + 1}" for c in range(d)]
        + ["db"]
        + [f"jumps{k + 1}" for k in range(m)]
    )
    yield header
    for p in range(scen.path_count):
        for i in range(scen.grid.N):
            row = [p, i]
            row += [scen.dW[p, i, c] for c in range(d)]
            row.append(scen.dB[p, i])
            row += [int(scen.jump_counts[p, i, k]) for k in range(m)]
            yield row
