"""Backward solvers for reflected equations driven by two Brownian motions
and a marked Poisson stream.

The information structure is two-sided: the conditional expectation E_i at
time t_i sees the forward history of W and of the jumps up to t_i together
with the remaining increments of B on [t_i, T].  Both solvers run the same
explicit backward recursion on a uniform grid

    Ytilde_i = E_i[ Y_{i+1} + f(t_{i+1}, Y_{i+1}, Z_{i+1}, U_{i+1}) * dt
                            + g(t_{i+1}, Y_{i+1}, Z_{i+1}, U_{i+1}) * dB_i ]
    Z_i      = E_i[ Y_{i+1} * dW_i ] / dt
    U_{i,k}  = E_i[ Y_{i+1} * (count_k - lambda_k*dt) ] / Var(count_k - lambda_k*dt)
    Y_i      = max(Ytilde_i, S_i),    dK_i = Y_i - Ytilde_i

so the  constraint Y >= S is enforced by reflection alone and dK is never
regression noise.  f and g are evaluated at the time-(i+1) values (explicit
scheme; dB_i is E_i-measurable, so the g term is dB_i * E_i[g]).

``solve_tree_exact`` computes every E_i exactly on the finite two-point
probability space (each dW component and dB equal to +-sqrt(dt), each mark
firing with probability lambda_k*dt).  A node at time t_i is the pair of
forward histories plus the future B signs; values never depend on past B
increments, so slices are stored as (W-history, jump-history, B-future)
arrays.  ``solve_lsmc`` replaces E_i by cross-sectional least squares on
scenario paths; run on an exhaustively enumerated two-point set with the
saturated indicator basis it reproduces the tree bit-for-bit up to float
summation order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .drivers import (
    MarkSpace,
    ScenarioSet,
    TimeGrid,
    _jump_pattern_probs,
    _jump_patterns,
    _sign_patterns,
)
from .errors import ConfigError, SolverError
from .expr import EvalContext, evaluate, variables
from .generator import GeneratorSpec, ensure_expr

#: coefficient callables receive (next_step_index, t_next, y, z, u, w, j)
CoefficientFn = Callable[..., np.ndarray]


def coefficient_from_expr(expr, intensities) -> CoefficientFn:
    expr = ensure_expr(expr)

    def fn(i_next, t, y, z, u, w, j):
        return evaluate(
            expr, EvalContext(t=t, y=y, z=z, u=u, w=w, j=j, intensities=intensities)
        )

    return fn


def _indexed_vars_ok(expr, dim_d, num_marks, label):
    for name in sorted(variables(expr)):
        if name[0] in "zw" and name[1:].isdigit() and int(name[1:]) > dim_d:
            raise ConfigError(f"{label} references '{name}' but d = {dim_d}")
        if name[0] in "uj" and name[1:].isdigit() and int(name[1:]) > num_marks:
            raise ConfigError(f"{label} references '{name}' but m = {num_marks}")


def _vars_within(expr, allowed, label):
    extra = variables(expr) - allowed
    if extra:
        raise ConfigError(f"{label} must not reference {sorted(extra)}")


@dataclass(frozen=True)
class ProblemSpec:
    """One reflected problem: drivers, coefficients, barrier and terminal.

    The barrier is a function of (t, w1..wd); the terminal condition a
    function of the Brownian endpoint (w1..wd) and the per-mark jump totals
    (j1..jm).  The barrier must not exceed the terminal value anywhere on
    the terminal states (checked at solve time; violation is a hard
    configuration error).
    """

    grid: TimeGrid
    dim_d: int
    marks: MarkSpace
    generator: GeneratorSpec
    barrier: object
    terminal: object

    def __post_init__(self):
        if self.dim_d < 1:
            raise ConfigError(f"dim_d must be >= 1, got {self.dim_d}")
        object.__setattr__(self, "barrier", ensure_expr(self.barrier))
        object.__setattr__(self, "terminal", ensure_expr(self.terminal))
        d, m = self.dim_d, self.marks.m
        allowed_w = {f"w{c}" for c in range(1, d + 1)}
        allowed_j = {f"j{k}" for k in range(1, m + 1)}
        _vars_within(self.barrier, {"t"} | allowed_w, "barrier")
        _vars_within(self.terminal, allowed_w | allowed_j, "terminal condition")
        for expr, label in (
            (self.generator.f, "generator f"),
            (self.generator.g, "coefficient g"),
        ):
            _indexed_vars_ok(expr, d, m, label)
        if self.generator.pi is not None:
            _indexed_vars_ok(self.generator.pi, d, m, "lower modulus pi")
        if self.generator.rate is not None:
            _indexed_vars_ok(self.generator.rate, d, m, "dominating rate f_t")

    def coefficient_fns(self):
        lam = self.marks.intensities
        return (
            coefficient_from_expr(self.generator.f, lam),
            coefficient_from_expr(self.generator.g, lam),
        )


def reflect_step(y_tilde: np.ndarray, barrier_values: np.ndarray):
    """Push the continuation value onto the barrier.

    Returns (y, dk) with y = max(y_tilde, s) and dk = y - y_tilde, so dk >= 0
    and (y - s) * dk == 0 hold bitwise: either dk is exactly zero or y was
    set to exactly s.
    """
    y = np.maximum(y_tilde, barrier_values)
    return y, y - y_tilde


def jump_variances(marks: MarkSpace, dt: float, mode: str) -> np.ndarray:
    """Variance of (one-step count - lambda*dt) under the driving law.

    This is the divisor in the U extraction: lambda*dt*(1 - lambda*dt) for
    the two-point/Bernoulli law, lambda*dt for gaussian/Poisson counts.
    """
    lam_dt = marks.intensities * dt
    if mode == "two-point":
        return lam_dt * (1.0 - lam_dt)
    return lam_dt


def extract_zu(y_next, dw, jump_counts, lam_dt, dt, jump_var):
    """Per-sample projection targets for the martingale integrands.

    The conditional mean of the returned arrays is (Z_i, U_{i,k}):
    z = y * dW / dt componentwise and u_k = y * (count_k - lambda_k*dt)
    divided by the variance of the compensated increment.  Marks with a
    vanishing compensator are excluded (target 0) with a warning.
    """
    y_next = np.asarray(y_next, dtype=float)
    z = y_next[..., None] * dw / dt
    comp = jump_counts - lam_dt
    jump_var = np.asarray(jump_var, dtype=float)
    safe = np.where(jump_var > 0.0, jump_var, 1.0)
    u = y_next[..., None] * comp / safe
    if np.any(jump_var <= 0.0):
        warnings.warn("mark with zero compensator excluded from U extraction")
        u = np.where(jump_var > 0.0, u, 0.0)
    return z, u


@dataclass
class SolutionGrid:
    """Path-indexed solution arrays on a common grid.

    Y and K have shape (P, N+1); Z has shape (P, N+1, d) and U (P, N+1, m)
    with the terminal integrands set to zero.  S holds the barrier values
    along each path.  weights are per-path probabilities summing to one.
    """

    grid: TimeGrid
    Y: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    K: np.ndarray
    S: np.ndarray
    weights: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def path_count(self) -> int:
        return self.Y.shape[0]

    def root_value(self) -> float:
        return float(self.weights @ self.Y[:, 0])

    def root_se(self) -> float:
        mu = self.root_value()
        var = float(self.weights @ (self.Y[:, 0] - mu) ** 2)
        return float(np.sqrt(var * (self.weights**2).sum()))

    def terminal_k(self) -> np.ndarray:
        return self.K[:, -1]

    def validate(self, barrier_tol: float = 1e-12):
        """Raise SolverError if the structural invariants fail."""
        for name, arr in (("Y", self.Y), ("Z", self.Z), ("U", self.U), ("K", self.K)):
            if not np.isfinite(arr).all():
                bad = np.argwhere(~np.isfinite(arr))[0]
                raise SolverError(f"non-finite {name} at (path, step) {tuple(bad[:2])}")
        if np.any(self.K[:, 0] != 0.0):
            raise SolverError("K does not start at zero")
        if np.any(np.diff(self.K, axis=1) < 0.0):
            raise SolverError("K is not nondecreasing")
        if np.any(self.Y < self.S - barrier_tol):
            bad = np.argwhere(self.Y < self.S - barrier_tol)[0]
            raise SolverError(f"Y below the barrier at (path, step) {tuple(bad)}")
        dk = np.diff(self.K, axis=1)
        products = (self.Y[:, :-1] - self.S[:, :-1]) * dk
        if np.any(products != 0.0):
            bad = np.argwhere(products != 0.0)[0]
            raise SolverError(
                f"reflection is not complementary at (path, step) {tuple(bad)}"
            )
        return self


def solution_csv_rows(sol: SolutionGrid):
    """Header plus one row per path-step (terminal step included)."""
    d = sol.Z.shape[2]
    m = sol.U.shape[2]
    header = (
        ["path", "step", "y"]
        + [f"z{c + 1}" for c in range(d)]
        + [f"u{k + 1}" for k in range(m)]
        + ["k"]
    )
    yield header
    for p in range(sol.path_count):
        for i in range(sol.grid.N + 1):
            row = [p, i, sol.Y[p, i]]
            row += list(sol.Z[p, i])
            row += list(sol.U[p, i])
            row.append(sol.K[p, i])
            yield row


@dataclass(frozen=True)
class TreeModel:
    """Exhaustive two-point branching model.

    Per step the branching is 2**d W-sign patterns, 2 B signs and 2**m jump
    patterns.  max_steps guards the default desk scale; max_states bounds
    the stored slice sizes.
    """

    grid: TimeGrid
    dim_d: int
    marks: MarkSpace
    max_steps: int = 6
    max_states: int = 4_000_000

    def __post_init__(self):
        if self.dim_d < 1:
            raise ConfigError(f"dim_d must be >= 1, got {self.dim_d}")
        if self.grid.N > self.max_steps:
            raise ConfigError(
                f"tree depth N = {self.grid.N} exceeds max_steps = {self.max_steps}; "
                "raise max_steps explicitly or use solve_lsmc"
            )
        if self.marks.total_intensity * self.grid.dt >= 1.0:
            raise ConfigError(
                "two-point law needs total_intensity * dt < 1, got "
                f"{self.marks.total_intensity * self.grid.dt:.6g}"
            )

    def slice_states(self, i: int) -> int:
        nw, nj = 2**self.dim_d, 2**self.marks.m
        return nw**i * nj**i * 2 ** (self.grid.N - i)

    def total_states(self) -> int:
        return sum(self.slice_states(i) for i in range(self.grid.N + 1))

    def ensure_budget(self):
        total = self.total_states()
        if total > self.max_states:
            raise SolverError(
                f"tree budget exceeded: {total} states > {self.max_states}; "
                "use solve_lsmc for this problem size"
            )


@dataclass
class TreeSolution:
    """Slice-indexed exact solution on the enumeration tree.

    Slice i holds arrays shaped (2**(d*i), 2**(m*i), 2**(N-i)): axis 0 is
    the W-sign history, axis 1 the jump history, axis 2 the future B signs
    (current-step sign is the high bit).  dK has one slice per step i < N.
    """

    problem: ProblemSpec
    tree: TreeModel
    Y: List[np.ndarray]
    Z: List[np.ndarray]
    U: List[np.ndarray]
    dK: List[np.ndarray]
    S: List[np.ndarray]
    j_prob: List[np.ndarray]

    @property
    def grid(self) -> TimeGrid:
        return self.problem.grid

    def state_probs(self, i: int) -> np.ndarray:
        """Exact probability of each slice-i state; sums to one."""
        N = self.grid.N
        nw = 2**self.problem.dim_d
        pw = nw ** (-float(i))
        pb = 0.5 ** (N - i)
        return pw * pb * self.j_prob[i][None, :, None] * np.ones_like(self.Y[i])

    def expectation(self, i: int, values: np.ndarray) -> float:
        return float((self.state_probs(i) * values).sum())

    def root_value(self) -> float:
        return float(self.Y[0].mean())

    def min_y(self) -> float:
        return min(float(y.min()) for y in self.Y)

    def to_solution_grid(self, max_paths: int = 2_000_000) -> SolutionGrid:
        """Materialize every full history as a weighted path."""
        N = self.grid.N
        d, m = self.problem.dim_d, self.problem.marks.m
        nw, nj = 2**d, 2**m
        P = nw**N * nj**N * 2**N
        if P > max_paths:
            raise SolverError(f"path materialization needs {P} paths (> {max_paths})")
        idx = np.arange(P)
        wh_full = idx // (nj**N * 2**N)
        jh_full = (idx // 2**N) % nj**N
        bh_full = idx % 2**N
        Y = np.empty((P, N + 1))
        K = np.zeros((P, N + 1))
        S = np.empty((P, N + 1))
        Z = np.zeros((P, N + 1, d))
        U = np.zeros((P, N + 1, m))
        for i in range(N + 1):
            wh = wh_full // nw ** (N - i)
            jh = jh_full // nj ** (N - i)
            b = bh_full % 2 ** (N - i)
            flat = (wh * nj**i + jh) * 2 ** (N - i) + b
            Y[:, i] = self.Y[i].reshape(-1)[flat]
            S[:, i] = self.S[i].reshape(-1)[flat]
            Z[:, i, :] = self.Z[i].reshape(self.Y[i].size, d)[flat]
            U[:, i, :] = self.U[i].reshape(self.Y[i].size, m)[flat]
            if i < N:
                K[:, i + 1] = K[:, i] + self.dK[i].reshape(-1)[flat]
        weights = (1.0 / nw) ** N * self.j_prob[N][jh_full] * 0.5**N
        return SolutionGrid(
            grid=self.grid,
            Y=Y,
            Z=Z,
            U=U,
            K=K,
            S=S,
            weights=weights,
            diagnostics={"source": "tree"},
        )


def _terminal_slices(problem: ProblemSpec, w_vals, j_vals):
    N = problem.grid.N
    d, m = problem.dim_d, problem.marks.m
    nw, nj = 2**d, 2**m
    shape = (nw**N, nj**N, 1)
    w_ctx = w_vals[N][:, None, None, :]
    j_ctx = j_vals[N][None, :, None, :]
    ctx = EvalContext(w=w_ctx, j=j_ctx, intensities=problem.marks.intensities)
    y_term = np.broadcast_to(
        np.asarray(evaluate(problem.terminal, ctx), dtype=float), shape
    ).copy()
    s_ctx = EvalContext(t=problem.grid.T, w=w_ctx)
    s_term = np.broadcast_to(
        np.asarray(evaluate(problem.barrier, s_ctx), dtype=float), shape
    ).copy()
    if np.any(s_term > y_term + 1e-12):
        worst = float((s_term - y_term).max())
        raise ConfigError(
            "barrier exceeds the terminal condition on a terminal state "
            f"(worst excess {worst:.3g}); the problem is ill-posed"
        )
    return y_term, s_term


def solve_tree_exact(
    problem: ProblemSpec,
    tree: Optional[TreeModel] = None,
    f_fn: Optional[CoefficientFn] = None,
    g_fn: Optional[CoefficientFn] = None,
) -> TreeSolution:
    """Exact dynamic programming over every two-point branch.

    f_fn and g_fn default to the problem's parsed coefficients; schemes
    pass wrapped callables (envelopes, frozen iterates, growth bounds)
    with the same signature.
    """
    if tree is None:
        tree = TreeModel(problem.grid, problem.dim_d, problem.marks)
    if tree.grid is not problem.grid and (
        tree.grid.N != problem.grid.N or tree.grid.T != problem.grid.T
    ):
        raise SolverError("tree grid differs from the problem grid")
    tree.ensure_budget()
    if f_fn is None or g_fn is None:
        default_f, default_g = problem.coefficient_fns()
        f_fn = f_fn or default_f
        g_fn = g_fn or default_g

    grid = problem.grid
    N, dt = grid.N, grid.dt
    d, m = problem.dim_d, problem.marks.m
    nw, nj = 2**d, 2**m
    root_dt = np.sqrt(dt)
    w_step = _sign_patterns(d) * root_dt          # (nw, d)
    j_step = _jump_patterns(m)                     # (nj, m)
    pj = _jump_pattern_probs(problem.marks, dt)    # (nj,)
    lam_dt = problem.marks.intensities * dt
    jvar = jump_variances(problem.marks, dt, "two-point")

    w_vals = [np.zeros((1, d))]
    j_vals = [np.zeros((1, m))]
    j_prob = [np.ones(1)]
    for i in range(N):
        w_vals.append(
            (w_vals[i][:, None, :] + w_step[None, :, :]).reshape(nw ** (i + 1), d)
        )
        j_vals.append(
            (j_vals[i][:, None, :] + j_step[None, :, :]).reshape(nj ** (i + 1), m)
        )
        j_prob.append((j_prob[i][:, None] * pj[None, :]).reshape(-1))

    Y = [None] * (N + 1)
    Z = [None] * (N + 1)
    U = [None] * (N + 1)
    S = [None] * (N + 1)
    dK = [None] * N

    Y[N], S[N] = _terminal_slices(problem, w_vals, j_vals)
    Z[N] = np.zeros(Y[N].shape + (d,))
    U[N] = np.zeros(Y[N].shape + (m,))

    db_signs = np.array([root_dt, -root_dt])
    for i in range(N - 1, -1, -1):
        nwi, nji, nb1 = nw**i, nj**i, 2 ** (N - i - 1)
        child_shape = Y[i + 1].shape
        t_next = grid.times[i + 1]
        w_ctx = w_vals[i + 1][:, None, None, :]
        j_ctx = j_vals[i + 1][None, :, None, :]
        f1 = np.broadcast_to(
            np.asarray(
                f_fn(i + 1, t_next, Y[i + 1], Z[i + 1], U[i + 1], w_ctx, j_ctx), float
            ),
            child_shape,
        )
        g1 = np.broadcast_to(
            np.asarray(
                g_fn(i + 1, t_next, Y[i + 1], Z[i + 1], U[i + 1], w_ctx, j_ctx), float
            ),
            child_shape,
        )
        Ar = (Y[i + 1] + f1 * dt).reshape(nwi, nw, nji, nj, nb1)
        gr = g1.reshape(nwi, nw, nji, nj, nb1)
        Yr = Y[i + 1].reshape(nwi, nw, nji, nj, nb1)
        EA = np.einsum("awbjn,j->abn", Ar, pj) / nw
        Eg = np.einsum("awbjn,j->abn", gr, pj) / nw
        Zc = np.einsum("awbjn,wc,j->abnc", Yr, w_step, pj) / (nw * dt)
        ju_weights = pj[:, None] * (j_step - lam_dt[None, :])  # (nj, m)
        Uc = np.einsum("awbjn,jk->abnk", Yr, ju_weights) / nw
        if m:
            Uc = Uc / jvar
        y_tilde = EA[:, :, None, :] + db_signs[None, None, :, None] * Eg[:, :, None, :]
        y_tilde = y_tilde.reshape(nwi, nji, 2 * nb1)
        Z[i] = (
            np.broadcast_to(Zc[:, :, None, :, :], (nwi, nji, 2, nb1, d))
            .reshape(nwi, nji, 2 * nb1, d)
            .copy()
        )
        U[i] = (
            np.broadcast_to(Uc[:, :, None, :, :], (nwi, nji, 2, nb1, m))
            .reshape(nwi, nji, 2 * nb1, m)
            .copy()
        )
        s_ctx = EvalContext(t=grid.times[i], w=w_vals[i][:, None, None, :])
        S[i] = np.broadcast_to(
            np.asarray(evaluate(problem.barrier, s_ctx), float), y_tilde.shape
        ).copy()
        Y[i], dK[i] = reflect_step(y_tilde, S[i])

    return TreeSolution(problem, tree, Y, Z, U, dK, S, j_prob)


def tree_balance_residual(
    sol: TreeSolution,
    f_fn: Optional[CoefficientFn] = None,
    g_fn: Optional[CoefficientFn] = None,
) -> float:
    """Max over nodes of |Y_i - dK_i - E_i[Y_{i+1} + f*dt + g*dB_i]|.

    The martingale terms Z*dW and U*(count - lambda*dt) have exact
    conditional mean zero, so this is the full discrete balance in
    conditional mean; it must vanish to float roundoff.
    """
    problem = sol.problem
    if f_fn is None or g_fn is None:
        default_f, default_g = problem.coefficient_fns()
        f_fn = f_fn or default_f
        g_fn = g_fn or default_g
    grid = problem.grid
    N, dt = grid.N, grid.dt
    d, m = problem.dim_d, problem.marks.m
    nw, nj = 2**d, 2**m
    root_dt = np.sqrt(dt)
    pj = _jump_pattern_probs(problem.marks, dt)
    w_step = _sign_patterns(d) * root_dt
    j_step = _jump_patterns(m)

    w_vals = [np.zeros((1, d))]
    j_vals = [np.zeros((1, m))]
    for i in range(N):
        w_vals.append(
            (w_vals[i][:, None, :] + w_step[None, :, :]).reshape(nw ** (i + 1), d)
        )
        j_vals.append(
            (j_vals[i][:, None, :] + j_step[None, :, :]).reshape(nj ** (i + 1), m)
        )

    worst = 0.0
    db_signs = np.array([root_dt, -root_dt])
    for i in range(N - 1, -1, -1):
        nwi, nji, nb1 = nw**i, nj**i, 2 ** (N - i - 1)
        t_next = grid.times[i + 1]
        w_ctx = w_vals[i + 1][:, None, None, :]
        j_ctx = j_vals[i + 1][None, :, None, :]
        f1 = np.broadcast_to(
            np.asarray(
                f_fn(i + 1, t_next, sol.Y[i + 1], sol.Z[i + 1], sol.U[i + 1], w_ctx, j_ctx),
                float,
            ),
            sol.Y[i + 1].shape,
        )
        g1 = np.broadcast_to(
            np.asarray(
                g_fn(i + 1, t_next, sol.Y[i + 1], sol.Z[i + 1], sol.U[i + 1], w_ctx, j_ctx),
                float,
            ),
            sol.Y[i + 1].shape,
        )
        Ar = (sol.Y[i + 1] + f1 * dt).reshape(nwi, nw, nji, nj, nb1)
        gr = g1.reshape(nwi, nw, nji, nj, nb1)
        EA = np.einsum("awbjn,j->abn", Ar, pj) / nw
        Eg = np.einsum("awbjn,j->abn", gr, pj) / nw
        cont = EA[:, :, None, :] + db_signs[None, None, :, None] * Eg[:, :, None, :]
        cont = cont.reshape(nwi, nji, 2 * nb1)
        resid = np.abs(sol.Y[i] - sol.dK[i] - cont).max()
        worst = max(worst, float(resid))
    return worst


@dataclass(frozen=True)
class SchemeParams:
    """Regression settings for the Monte Carlo solver.

    basis 'poly' regresses on polynomials of degree <= degree in each
    conditioning feature (W_{t_i} components, cumulative jump counts,
    B_T - B_{t_i}) plus the barrier value, with a fixed ridge weight;
    'indicator' groups paths by their exact conditioning atom (meant for
    exhaustively enumerated two-point sets, where it reproduces the exact
    conditional expectation).
    """

    basis: str = "poly"
    degree: int = 2
    ridge: float = 1e-8
    max_condition: float = 1e14

    def __post_init__(self):
        if self.basis not in ("poly", "indicator"):
            raise ConfigError(f"basis must be 'poly' or 'indicator', got {self.basis!r}")
        if self.degree < 1:
            raise ConfigError("degree must be >= 1")
        if self.ridge < 0.0:
            raise ConfigError("ridge must be >= 0")


def _poly_fit(features, s_col, wts, targets, params: SchemeParams, step: int):
    """Weighted ridge regression; returns fitted values for every target
    column.  Constant columns are dropped (the intercept carries them)."""
    cols = [np.ones_like(s_col)]
    for feat in features:
        for power in range(1, params.degree + 1):
            cols.append(feat**power)
    cols.append(s_col)
    X = np.column_stack(cols)
    keep = [0] + [
        c for c in range(1, X.shape[1]) if X[:, c].max() != X[:, c].min()
    ]
    X = X[:, keep]
    gram = X.T @ (X * wts[:, None])
    eigs = np.linalg.eigvalsh(gram)
    cond = np.inf if eigs[0] <= 0.0 else float(eigs[-1] / eigs[0])
    if cond > params.max_condition:
        raise SolverError(
            f"regression ill-conditioned at step {step} with basis 'poly' "
            f"(condition {cond:.3g})"
        )
    rhs = X.T @ (targets * wts[:, None])
    beta = np.linalg.solve(gram + params.ridge * np.eye(X.shape[1]), rhs)
    return X @ beta, len(keep)


def _atom_ids(scen: ScenarioSet, step: int):
    """Conditioning atom of each path at t_step: forward W/jump history and
    the remaining B signs."""
    P, N, d = scen.dW.shape
    m = scen.num_marks
    parts = [
        (scen.dW[:, :step, :] > 0).reshape(P, step * d).astype(np.int8),
        scen.jump_counts[:, :step, :].reshape(P, step * m).astype(np.int64),
        (scen.dB[:, step:] > 0).astype(np.int8),
    ]
    key = np.column_stack([p.astype(np.int64) for p in parts])
    _, ids = np.unique(key, axis=0, return_inverse=True)
    return ids


def _group_means(ids, wts, targets):
    n = int(ids.max()) + 1
    den = np.bincount(ids, weights=wts, minlength=n)
    out = np.empty_like(targets)
    for c in range(targets.shape[1]):
        num = np.bincount(ids, weights=wts * targets[:, c], minlength=n)
        out[:, c] = (num / den)[ids]
    return out, n


def solve_lsmc(
    problem: ProblemSpec,
    scenarios: ScenarioSet,
    scheme: SchemeParams = SchemeParams(),
    f_fn: Optional[CoefficientFn] = None,
    g_fn: Optional[CoefficientFn] = None,
) -> SolutionGrid:
    """Backward least-squares Monte Carlo on scenario paths."""
    grid = problem.grid
    if scenarios.grid.N != grid.N or scenarios.grid.T != grid.T:
        raise SolverError("scenario grid differs from the problem grid")
    if scenarios.dim_d != problem.dim_d or scenarios.num_marks != problem.marks.m:
        raise SolverError("scenario dimensions differ from the problem's")
    if f_fn is None or g_fn is None:
        default_f, default_g = problem.coefficient_fns()
        f_fn = f_fn or default_f
        g_fn = g_fn or default_g

    N, dt, T = grid.N, grid.dt, grid.T
    d, m = problem.dim_d, problem.marks.m
    P = scenarios.path_count
    if scheme.basis == "poly":
        declared = 2 + scheme.degree * (d + m + 1)
        if P < 10 * declared:
            raise ConfigError(
                f"need at least {10 * declared} paths for a basis of size "
                f"{declared}, got {P}"
            )
    wts = scenarios.path_weights()
    W = scenarios.brownian_paths()
    J = scenarios.jump_paths()
    B_rem = scenarios.b_remaining()
    lam = problem.marks.intensities
    lam_dt = lam * dt
    jvar = jump_variances(problem.marks, dt, scenarios.mode)

    Y = np.empty((P, N + 1))
    Z = np.zeros((P, N + 1, d))
    U = np.zeros((P, N + 1, m))
    K = np.zeros((P, N + 1))
    S = np.empty((P, N + 1))

    term_ctx = EvalContext(w=W[:, N, :], j=J[:, N, :], intensities=lam)
    Y[:, N] = np.broadcast_to(
        np.asarray(evaluate(problem.terminal, term_ctx), float), (P,)
    )
    S[:, N] = np.broadcast_to(
        np.asarray(
            evaluate(problem.barrier, EvalContext(t=T, w=W[:, N, :])), float
        ),
        (P,),
    )
    if np.any(S[:, N] > Y[:, N] + 1e-12):
        worst = float((S[:, N] - Y[:, N]).max())
        raise ConfigError(
            "barrier exceeds the terminal condition on a terminal state "
            f"(worst excess {worst:.3g}); the problem is ill-posed"
        )

    resid_rms = []
    basis_sizes = []
    dk_cols = np.empty((P, N))
    for i in range(N - 1, -1, -1):
        t_next = grid.times[i + 1]
        f1 = np.broadcast_to(
            np.asarray(
                f_fn(i + 1, t_next, Y[:, i + 1], Z[:, i + 1], U[:, i + 1],
                     W[:, i + 1, :], J[:, i + 1, :]),
                float,
            ),
            (P,),
        )
        g1 = np.broadcast_to(
            np.asarray(
                g_fn(i + 1, t_next, Y[:, i + 1], Z[:, i + 1], U[:, i + 1],
                     W[:, i + 1, :], J[:, i + 1, :]),
                float,
            ),
            (P,),
        )
        target_y = Y[:, i + 1] + f1 * dt + g1 * scenarios.dB[:, i]
        zt, ut = extract_zu(
            Y[:, i + 1], scenarios.dW[:, i, :], scenarios.jump_counts[:, i, :],
            lam_dt, dt, jvar,
        )
        targets = np.column_stack([target_y, zt, ut])
        S[:, i] = np.broadcast_to(
            np.asarray(
                evaluate(problem.barrier, EvalContext(t=grid.times[i], w=W[:, i, :])),
                float,
            ),
            (P,),
        )
        if scheme.basis == "indicator":
            ids = _atom_ids(scenarios, i)
            fitted, n_basis = _group_means(ids, wts, targets)
        else:
            features = [W[:, i, c] for c in range(d)]
            features += [J[:, i, k] for k in range(m)]
            features.append(B_rem[:, i])
            fitted, n_basis = _poly_fit(features, S[:, i], wts, targets, scheme, i)
        y_tilde = fitted[:, 0]
        Z[:, i, :] = fitted[:, 1 : 1 + d]
        U[:, i, :] = fitted[:, 1 + d :]
        Y[:, i], dk_cols[:, i] = reflect_step(y_tilde, S[:, i])
        resid_rms.append(float(np.sqrt(wts @ (target_y - y_tilde) ** 2)))
        basis_sizes.append(n_basis)

    np.cumsum(dk_cols, axis=1, out=K[:, 1:])
    return SolutionGrid(
        grid=grid,
        Y=Y,
        Z=Z,
        U=U,
        K=K,
        S=S,
        weights=wts,
        diagnostics={
            "basis": scheme.basis,
            "basis_sizes": basis_sizes[::-1],
            "regression_rms": resid_rms[::-1],
            "mode": scenarios.mode,
        },
    )
