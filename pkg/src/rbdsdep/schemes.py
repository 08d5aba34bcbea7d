"""Approximation pipelines built on the exact tree solver.

Three pipelines, one per construction:

* inf-envelope sequence: replace f by its grid inf-convolution f_n and
  solve for an increasing list of n; roots grow toward the minimal
  solution and stay below the companion upper bound V driven by
  C(1 + |y| + |z| + |u|).
* bracketing iteration for discontinuous f: two anchor solves with the
  signed growth bound +-(C(|y|+|z|+|u|) + f_t), then iterates whose
  generator freezes the previous iterate's (Y, Z, U) node-wise inside f
  and adds the modulus pi of the increment; the iterates are sandwiched
  between the anchors.
* sup-envelope sequence: the mirror construction from above, decreasing
  toward the maximal solution.

Every per-n solution is materialized, validated against the reflection
invariants, and kept in the run for downstream checks.  Premise checks
(growth, contraction, modulus) are sampling certificates on documented
clouds; a failed certificate aborts the run before any solve.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .analysis import norm_report
from .errors import ConfigError
from .expr import EvalContext, evaluate
from .generator import (
    EnvelopeFunction,
    EnvelopeParams,
    check_g_contraction,
    check_linear_growth,
    check_pi_minorant,
    sample_cloud,
)
from .solver import (
    CoefficientFn,
    ProblemSpec,
    SolutionGrid,
    TreeModel,
    TreeSolution,
    solve_tree_exact,
)

_CERT_CLOUD_SIZE = 512
_CERT_RADIUS = 5.0


@dataclass
class SequenceRun:
    """One pipeline run: per-n solutions plus the ordering evidence.

    report is JSON-serializable throughout; heavyweight companions (the
    upper bound V, the bracketing anchors) sit in their own fields.
    """

    mode: str
    base_problem: ProblemSpec
    index_set: List[float]
    solutions: List[SolutionGrid]
    y0_series: List[float]
    report: dict = field(default_factory=dict)
    upper_solution: Optional[SolutionGrid] = None
    lower_anchor: Optional[SolutionGrid] = None
    upper_anchor: Optional[SolutionGrid] = None


def _node_margin(a: TreeSolution, b: TreeSolution) -> float:
    """Node-wise min of (b.Y - a.Y) over every slice and time."""
    return min(float((yb - ya).min()) for ya, yb in zip(a.Y, b.Y))


def _solve_many(problem, tree, f_fns, threads):
    if threads <= 1 or len(f_fns) <= 1:
        return [solve_tree_exact(problem, tree, f_fn=fn) for fn in f_fns]
    out = [None] * len(f_fns)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {
            pool.submit(solve_tree_exact, problem, tree, fn): k
            for k, fn in enumerate(f_fns)
        }
        for fut in as_completed(futures):
            out[futures[fut]] = fut.result()
    return out


def _materialize(tree_sols):
    grids = [ts.to_solution_grid() for ts in tree_sols]
    for g in grids:
        g.validate()
    return grids


def _successive_diffs(grids, marks, dt):
    lam = marks.intensities[None, None, :]
    z_diffs, u_diffs = [], []
    for a, b in zip(grids, grids[1:]):
        dz = ((b.Z[:, :-1, :] - a.Z[:, :-1, :]) ** 2).sum(axis=(1, 2)) * dt
        du = (lam * (b.U[:, :-1, :] - a.U[:, :-1, :]) ** 2).sum(axis=(1, 2)) * dt
        z_diffs.append(float(a.weights @ dz))
        u_diffs.append(float(a.weights @ du))
    return z_diffs, u_diffs


def _certify_growth(problem: ProblemSpec, seed: int) -> float:
    cloud = sample_cloud(
        _CERT_CLOUD_SIZE,
        seed,
        problem.dim_d,
        problem.marks.m,
        t_max=problem.grid.T,
        radius=_CERT_RADIUS,
        intensities=problem.marks.intensities,
    )
    report = check_linear_growth(problem.generator, cloud)
    if not report.passed:
        raise ConfigError(
            "linear growth certificate failed: |f| exceeds "
            f"C(1+|y|+|z|+|u|) on the sample cloud (worst ratio {report.worst:.4g})"
        )
    return report.worst


def _paired_clouds(problem: ProblemSpec, seed: int):
    a = sample_cloud(
        _CERT_CLOUD_SIZE,
        seed,
        problem.dim_d,
        problem.marks.m,
        t_max=problem.grid.T,
        radius=_CERT_RADIUS,
        intensities=problem.marks.intensities,
    )
    b = sample_cloud(
        _CERT_CLOUD_SIZE,
        seed + 1,
        problem.dim_d,
        problem.marks.m,
        t_max=problem.grid.T,
        radius=_CERT_RADIUS,
        intensities=problem.marks.intensities,
    )
    b.t = a.t  # the pair checks condition on a shared time
    return a, b


def _rate_at(problem: ProblemSpec):
    rate = problem.generator.rate

    def value(t):
        return float(np.asarray(evaluate(rate, EvalContext(t=float(t)))))

    return value


def _envelope_coefficient(
    problem: ProblemSpec, env: EnvelopeParams, n: float, kind: str
) -> CoefficientFn:
    envelope = EnvelopeFunction(
        problem.generator.f,
        replace(env, n=n),
        kind,
        dim_d=problem.dim_d,
        num_marks=problem.marks.m,
        intensities=problem.marks.intensities,
        growth_c=problem.generator.growth_C,
        raise_on_boundary=True,
    )

    def fn(i_next, t, y, z, u, w, j):
        return envelope(t, y, z=z, u=u, w=w, j=j)

    return fn


def _effective_indices(ns, growth_c):
    eff = []
    for n in ns:
        ne = max(float(n), float(growth_c))
        if not eff or ne != eff[-1]:
            eff.append(ne)
    return eff


def _truncate_at_tol(values, tol):
    """Index one past the first successive pair within tol (no stop: len)."""
    for k in range(1, len(values)):
        if abs(values[k] - values[k - 1]) < tol:
            return k + 1
    return len(values)


def upper_bound_coefficient(problem: ProblemSpec) -> CoefficientFn:
    """The dominating generator C(1 + |y| + |z| + |u|_lambda)."""
    C = problem.generator.growth_C
    lam = problem.marks.intensities

    def fn(i_next, t, y, z, u, w, j):
        zn = np.sqrt((z * z).sum(axis=-1))
        un = np.sqrt((lam * u * u).sum(axis=-1))
        return C * (1.0 + np.abs(y) + zn + un)

    return fn


def solve_upper_bound_tree(
    problem: ProblemSpec, tree: Optional[TreeModel] = None
) -> TreeSolution:
    return solve_tree_exact(problem, tree, f_fn=upper_bound_coefficient(problem))


def solve_upper_bound_V(
    problem: ProblemSpec, tree: Optional[TreeModel] = None
) -> SolutionGrid:
    """Solve the companion upper-bound problem; its Y dominates every
    inf-envelope iterate of the same data node-wise."""
    sol = solve_upper_bound_tree(problem, tree).to_solution_grid()
    return sol.validate()


def _run_envelope(
    problem: ProblemSpec,
    env: EnvelopeParams,
    ns,
    kind: str,
    tree: Optional[TreeModel],
    threads: int,
    early_stop_tol: float,
    with_upper: bool,
    cert_seed: int,
) -> SequenceRun:
    worst_growth = _certify_growth(problem, cert_seed)
    if ns is None:
        ns = [1, 2, 4, 8, 16]
    eff = _effective_indices(ns, problem.generator.growth_C)
    if tree is None:
        tree = TreeModel(problem.grid, problem.dim_d, problem.marks)
    f_fns = [_envelope_coefficient(problem, env, n, kind) for n in eff]
    tree_sols = _solve_many(problem, tree, f_fns, threads)
    roots = [ts.root_value() for ts in tree_sols]
    cut = _truncate_at_tol(roots, early_stop_tol)
    truncated = cut < len(eff)
    eff, tree_sols, roots = eff[:cut], tree_sols[:cut], roots[:cut]

    if kind == "inf":
        pair_margins = [_node_margin(a, b) for a, b in zip(tree_sols, tree_sols[1:])]
    else:
        pair_margins = [_node_margin(b, a) for a, b in zip(tree_sols, tree_sols[1:])]
    grids = _materialize(tree_sols)
    norms = [norm_report(g, problem.marks) for g in grids]
    z_diffs, u_diffs = _successive_diffs(grids, problem.marks, problem.grid.dt)

    report = {
        "index_set": eff,
        "truncated": truncated,
        "growth_worst_ratio": worst_growth,
        "pair_margins": pair_margins,
        "monotone_ok": all(mg >= -1e-10 for mg in pair_margins),
        "norms": norms,
        "z_diffs": z_diffs,
        "u_diffs": u_diffs,
        "row_margins": [0.0] + pair_margins,
    }
    run = SequenceRun(
        mode="inf_envelope" if kind == "inf" else "sup_envelope",
        base_problem=problem,
        index_set=eff,
        solutions=grids,
        y0_series=roots,
        report=report,
    )
    if kind == "inf" and with_upper:
        v_tree = solve_upper_bound_tree(problem, tree)
        run.upper_solution = v_tree.to_solution_grid().validate()
        report["v_root"] = v_tree.root_value()
        report["v_node_margin"] = min(
            _node_margin(ts, v_tree) for ts in tree_sols
        )
    return run


def run_inf_envelope_sequence(
    problem: ProblemSpec,
    env: EnvelopeParams,
    ns=None,
    tree: Optional[TreeModel] = None,
    threads: int = 1,
    early_stop_tol: float = 1e-9,
    with_upper: bool = True,
    cert_seed: int = 977,
) -> SequenceRun:
    """Monotone-from-below sequence of envelope solves.

    ns defaults to [1, 2, 4, 8, 16], clipped up to the growth constant and
    deduplicated.  The series is cut after the first successive pair of
    roots within early_stop_tol (computation order does not depend on the
    thread count, so parallel runs report the identical truncation).
    """
    return _run_envelope(
        problem, env, ns, "inf", tree, threads, early_stop_tol, with_upper, cert_seed
    )


def run_sup_envelope_sequence(
    problem: ProblemSpec,
    env: EnvelopeParams,
    ns=None,
    tree: Optional[TreeModel] = None,
    threads: int = 1,
    early_stop_tol: float = 1e-9,
    cert_seed: int = 977,
) -> SequenceRun:
    """Mirror of the inf sequence: nonincreasing roots from above."""
    return _run_envelope(
        problem, env, ns, "sup", tree, threads, early_stop_tol, False, cert_seed
    )


def _certify_signed_growth(problem: ProblemSpec, seed: int) -> float:
    gen = problem.generator
    cloud = sample_cloud(
        _CERT_CLOUD_SIZE,
        seed,
        problem.dim_d,
        problem.marks.m,
        t_max=problem.grid.T,
        radius=_CERT_RADIUS,
        intensities=problem.marks.intensities,
    )
    fvals = np.abs(np.asarray(evaluate(gen.f, cloud.context()), dtype=float))
    rate_vals = np.asarray(
        evaluate(gen.rate, EvalContext(t=cloud.t)), dtype=float
    )
    rate_vals = np.broadcast_to(rate_vals, cloud.t.shape)
    ay, zn, un = cloud.size_norms()
    bound = rate_vals + gen.growth_C * (ay + zn + un)
    worst = float((fvals - bound).max())
    if worst > 1e-9:
        raise ConfigError(
            "signed growth certificate failed: |f| exceeds "
            f"f_t + C(|y|+|z|+|u|) on the sample cloud (worst excess {worst:.4g})"
        )
    rate_grid = np.asarray(
        evaluate(gen.rate, EvalContext(t=problem.grid.times)), dtype=float
    )
    rate_min = float(np.broadcast_to(rate_grid, problem.grid.times.shape).min())
    if rate_min < -1e-12:
        raise ConfigError(f"dominating rate f_t is negative (min {rate_min:.4g})")
    return worst


def _frozen_source_coefficient(
    problem: ProblemSpec, prev: TreeSolution
) -> CoefficientFn:
    """Generator of one bracketing iterate.

    f is evaluated at the previous iterate's node values (an exogenous
    source), pi at the increment of the current child values over them.
    """
    gen = problem.generator
    lam = problem.marks.intensities

    def fn(i_next, t, y, z, u, w, j):
        py = prev.Y[i_next]
        pz = prev.Z[i_next]
        pu = prev.U[i_next]
        base = evaluate(
            gen.f, EvalContext(t=t, y=py, z=pz, u=pu, w=w, j=j, intensities=lam)
        )
        inc = evaluate(
            gen.pi,
            EvalContext(t=t, y=y - py, z=z - pz, u=u - pu, intensities=lam),
        )
        return np.asarray(base, dtype=float) + np.asarray(inc, dtype=float)

    return fn


def run_bracketing_sequence(
    problem: ProblemSpec,
    ns_count: int = 5,
    tree: Optional[TreeModel] = None,
    tolerance: float = 1e-10,
    cert_seed: int = 1789,
) -> SequenceRun:
    """Anchor solves plus the frozen-source iteration.

    The lower anchor uses -(C(|y|+|z|+|u|) + f_t), the upper its mirror;
    iterate n solves with f at iterate n-1's node values plus pi of the
    increment.  The node-wise sandwich lower <= iterate n <= iterate n+1
    <= upper is recorded with its worst node; a violation beyond
    tolerance marks the report failed rather than raising.
    """
    gen = problem.generator
    if gen.pi is None:
        raise ConfigError("bracketing needs the increment modulus pi")
    if gen.rate is None:
        raise ConfigError("bracketing needs the dominating rate f_t")
    if ns_count < 1:
        raise ConfigError("ns_count must be >= 1")
    certs = {"signed_growth_excess": _certify_signed_growth(problem, cert_seed)}
    cloud_a, cloud_b = _paired_clouds(problem, cert_seed + 10)
    pi_report = check_pi_minorant(gen, cloud_a, cloud_b)
    if not pi_report.passed:
        raise ConfigError(
            "modulus certificate failed: f differences dip below pi on the "
            f"sample pairs (worst {pi_report.worst:.4g})"
        )
    certs["pi_worst"] = pi_report.worst
    g_report = check_g_contraction(gen, cloud_a, cloud_b)
    if not g_report.passed:
        raise ConfigError(
            "contraction certificate failed for g on the sample pairs "
            f"(worst {g_report.worst:.4g})"
        )
    certs["g_worst"] = g_report.worst

    if tree is None:
        tree = TreeModel(problem.grid, problem.dim_d, problem.marks)
    C = gen.growth_C
    lam = problem.marks.intensities
    rate_at = _rate_at(problem)

    def lower_fn(i_next, t, y, z, u, w, j):
        zn = np.sqrt((z * z).sum(axis=-1))
        un = np.sqrt((lam * u * u).sum(axis=-1))
        return -(C * (np.abs(y) + zn + un) + rate_at(t))

    def upper_fn(i_next, t, y, z, u, w, j):
        zn = np.sqrt((z * z).sum(axis=-1))
        un = np.sqrt((lam * u * u).sum(axis=-1))
        return C * (np.abs(y) + zn + un) + rate_at(t)

    lower = solve_tree_exact(problem, tree, f_fn=lower_fn)
    upper = solve_tree_exact(problem, tree, f_fn=upper_fn)

    iterates: List[TreeSolution] = []
    prev = lower
    for _ in range(ns_count):
        cur = solve_tree_exact(
            problem, tree, f_fn=_frozen_source_coefficient(problem, prev)
        )
        iterates.append(cur)
        prev = cur

    chain = [lower] + iterates
    pair_margins = [_node_margin(a, b) for a, b in zip(chain, chain[1:])]
    upper_margins = [_node_margin(x, upper) for x in chain]
    sandwich_worst = min(pair_margins + upper_margins)

    grids = _materialize(iterates)
    norms = [norm_report(g, problem.marks) for g in grids]
    z_diffs, u_diffs = _successive_diffs(grids, problem.marks, problem.grid.dt)
    roots = [ts.root_value() for ts in iterates]

    report = {
        "index_set": list(range(1, ns_count + 1)),
        "certificates": certs,
        "lower_root": lower.root_value(),
        "upper_root": upper.root_value(),
        "pair_margins": pair_margins,
        "upper_margins": upper_margins,
        "sandwich_worst": sandwich_worst,
        "sandwich_ok": sandwich_worst >= -tolerance,
        "monotone_ok": all(mg >= -tolerance for mg in pair_margins),
        "norms": norms,
        "z_diffs": z_diffs,
        "u_diffs": u_diffs,
        "row_margins": pair_margins,
    }
    lower_grid = lower.to_solution_grid()
    upper_grid = upper.to_solution_grid()
    lower_grid.validate()
    upper_grid.validate()
    return SequenceRun(
        mode="bracketing",
        base_problem=problem,
        index_set=[float(n) for n in range(1, ns_count + 1)],
        solutions=grids,
        y0_series=roots,
        report=report,
        lower_anchor=lower_grid,
        upper_anchor=upper_grid,
    )


def sequence_csv_rows(run: SequenceRun):
    """Header plus one row per computed index.

    margin is the node-wise ordering margin against the previous element
    of the chain (the lower anchor for the first bracketing iterate; 0.0
    for the first envelope row, which has no predecessor).
    """
    header = ["n", "y0", "k_t_mean", "z_norm_sq", "u_norm_sq", "margin"]
    yield header
    norms = run.report["norms"]
    margins = run.report["row_margins"]
    for k, n in enumerate(run.index_set):
        sol = run.solutions[k]
        k_t_mean = float(sol.weights @ sol.K[:, -1])
        yield [
            n,
            run.y0_series[k],
            k_t_mean,
            norms[k]["z_norm_sq"],
            norms[k]["u_norm_sq"],
            margins[k],
        ]
