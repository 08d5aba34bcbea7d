"""Approximation pipelines: envelope sequences, bracketing iteration,
companion upper bound."""

import numpy as np
import pytest

from rbdsdep.drivers import MarkSpace, build_time_grid, empty_marks
from rbdsdep.errors import ConfigError
from rbdsdep.generator import EnvelopeParams, GeneratorSpec
from rbdsdep.schemes import (
    run_bracketing_sequence,
    run_inf_envelope_sequence,
    run_sup_envelope_sequence,
    sequence_csv_rows,
    solve_upper_bound_tree,
    solve_upper_bound_V,
)
from rbdsdep.solver import ProblemSpec, solve_tree_exact

MARKS = MarkSpace(np.array([1.0]), np.array([0.4]))
ENV = EnvelopeParams(n=1.0, box={"y": (-5.0, 5.0)}, grid_points=201)


def make_problem(
    f="0",
    g="0",
    barrier="-10",
    terminal="0",
    T=1.0,
    N=4,
    marks=None,
    **gen_kw,
):
    grid = build_time_grid(T, N)
    if marks is None:
        marks = empty_marks()
    return ProblemSpec(grid, 1, marks, GeneratorSpec(f=f, g=g, **gen_kw), barrier, terminal)


class TestInfEnvelopeSequence:
    def test_lipschitz_identity_at_matching_slope(self):
        # inf-convolution of |y| with penalty slope 1 reproduces |y| at
        # every query, so the n = 1 solve equals the direct solve
        prob = make_problem(f="abs(y)", terminal="w1", T=0.5, N=3, marks=MARKS)
        direct = solve_tree_exact(prob).to_solution_grid()
        run = run_inf_envelope_sequence(prob, ENV, ns=[1])
        assert run.mode == "inf_envelope"
        assert run.y0_series[0] == pytest.approx(direct.root_value(), abs=1e-12)
        assert np.abs(run.solutions[0].Y - direct.Y).max() <= 1e-12

    def test_roots_nondecreasing_with_node_margins(self):
        prob = make_problem(
            f="min(abs(y), 2)", terminal="w1", T=0.5, N=3, marks=MARKS
        )
        run = run_inf_envelope_sequence(prob, ENV, ns=[1, 2, 4, 8])
        assert run.index_set == [1.0, 2.0, 4.0, 8.0]
        assert not run.report["truncated"]
        diffs = np.diff(run.y0_series)
        assert (diffs >= -1e-10).all()
        assert diffs.max() > 1e-3  # the sequence actually moves
        assert run.report["monotone_ok"]
        assert min(run.report["pair_margins"]) >= -1e-10
        assert len(run.solutions) == 4
        for norms in run.report["norms"]:
            assert set(norms) == {"sup_y_sq", "z_norm_sq", "u_norm_sq", "k_t_sq"}

    def test_upper_bound_dominates_every_iterate(self):
        prob = make_problem(
            f="min(abs(y), 2)", terminal="w1", T=0.5, N=3, marks=MARKS
        )
        run = run_inf_envelope_sequence(prob, ENV, ns=[1, 2, 4, 8])
        assert run.upper_solution is not None
        assert run.report["v_node_margin"] >= -1e-12
        assert run.report["v_root"] >= max(run.y0_series)

    def test_indices_clipped_to_growth_constant_and_deduped(self):
        prob = make_problem(
            f="min(abs(y), 2)", terminal="w1", T=0.5, N=3, marks=MARKS
        )
        run = run_inf_envelope_sequence(prob, ENV, ns=[0.5, 1, 1, 2])
        assert run.index_set == [1.0, 2.0]

    def test_early_stop_truncates_the_series(self):
        prob = make_problem(
            f="min(abs(y), 2)", terminal="w1", T=0.5, N=3, marks=MARKS
        )
        run = run_inf_envelope_sequence(prob, ENV, ns=[1, 2, 4], early_stop_tol=10.0)
        assert run.report["truncated"]
        assert run.index_set == [1.0, 2.0]
        assert len(run.y0_series) == 2

    def test_thread_count_does_not_change_results(self):
        prob = make_problem(
            f="min(abs(y), 2)", terminal="w1", T=0.5, N=3, marks=MARKS
        )
        seq = run_inf_envelope_sequence(prob, ENV, ns=[1, 2, 4], threads=1)
        par = run_inf_envelope_sequence(prob, ENV, ns=[1, 2, 4], threads=3)
        assert par.y0_series == seq.y0_series
        for a, b in zip(par.solutions, seq.solutions):
            assert np.array_equal(a.Y, b.Y)
            assert np.array_equal(a.K, b.K)

    def test_growth_certificate_gates_the_run(self):
        prob = make_problem(f="5*y", terminal="w1", T=0.5, N=3)
        with pytest.raises(ConfigError, match="linear growth certificate failed"):
            run_inf_envelope_sequence(prob, ENV, ns=[1, 2])


class TestSupEnvelopeSequence:
    def test_lipschitz_identity_at_matching_slope(self):
        prob = make_problem(f="-abs(y)", terminal="w1", T=0.5, N=3, marks=MARKS)
        direct = solve_tree_exact(prob).to_solution_grid()
        run = run_sup_envelope_sequence(prob, ENV, ns=[1])
        assert run.mode == "sup_envelope"
        assert run.y0_series[0] == pytest.approx(direct.root_value(), abs=1e-12)
        assert np.abs(run.solutions[0].Y - direct.Y).max() <= 1e-12

    def test_roots_nonincreasing(self):
        prob = make_problem(
            f="min(abs(y), 2)", terminal="w1", T=0.5, N=3, marks=MARKS
        )
        run = run_sup_envelope_sequence(prob, ENV, ns=[1, 2, 4])
        diffs = np.diff(run.y0_series)
        assert (diffs <= 1e-10).all()
        assert run.report["monotone_ok"]
        assert min(run.report["pair_margins"]) >= -1e-10
        assert run.upper_solution is None

    def test_sup_starts_at_or_above_inf(self):
        # at n = 1 both envelopes of a 1-Lipschitz f coincide with f
        prob = make_problem(
            f="min(abs(y), 2)", terminal="w1", T=0.5, N=3, marks=MARKS
        )
        lo = run_inf_envelope_sequence(prob, ENV, ns=[1], with_upper=False)
        hi = run_sup_envelope_sequence(prob, ENV, ns=[1])
        assert hi.y0_series[0] == pytest.approx(lo.y0_series[0], abs=1e-12)


class TestUpperBound:
    def test_dominates_the_zero_generator_solve(self):
        prob = make_problem(f="0", terminal="w1", T=0.5, N=3, marks=MARKS)
        direct = solve_tree_exact(prob)
        v = solve_upper_bound_V(prob)
        assert v.root_value() > direct.root_value()
        assert v.root_value() > 1.0  # the constant term alone integrates past T

    def test_expression_route_matches_the_builtin_coefficient(self):
        prob = make_problem(f="0", terminal="w1", T=0.5, N=3, marks=MARKS)
        v1 = solve_upper_bound_tree(prob)
        alt = make_problem(
            f="1 + abs(y) + znorm + unorm", terminal="w1", T=0.5, N=3, marks=MARKS
        )
        v2 = solve_tree_exact(alt)
        assert v1.root_value() == pytest.approx(v2.root_value(), abs=1e-12)
        for a, b in zip(v1.Y, v2.Y):
            assert np.abs(a - b).max() <= 1e-12


class TestBracketing:
    def test_linear_f_with_exact_modulus_is_a_fixed_point(self):
        # pi equal to the increment of f makes every iterate solve the
        # true equation: f(prev) + pi(y - prev) = f(y)
        prob = make_problem(
            f="0.5*y", pi="0.5*y", rate="0", terminal="w1 + 1", barrier="-4",
            T=0.5, N=3,
        )
        direct = solve_tree_exact(prob).to_solution_grid()
        run = run_bracketing_sequence(prob, ns_count=3)
        assert run.mode == "bracketing"
        for root, sol in zip(run.y0_series, run.solutions):
            assert root == pytest.approx(direct.root_value(), abs=1e-12)
            assert np.abs(sol.Y - direct.Y).max() <= 1e-12
        assert run.report["sandwich_ok"]
        assert run.report["lower_root"] < direct.root_value() < run.report["upper_root"]

    def test_discontinuous_f_is_sandwiched_and_stabilizes(self):
        prob = make_problem(
            f="indicator_pos(y)", pi="0", rate="1", barrier="-4",
            terminal="w1 + 0.2", T=0.25, N=4,
        )
        run = run_bracketing_sequence(prob, ns_count=5)
        assert run.y0_series == pytest.approx(
            [0.32109375, 0.35234375, 0.38359375, 0.38359375, 0.38359375],
            abs=1e-12,
        )
        assert run.report["lower_root"] == pytest.approx(-0.3166553497314453, abs=1e-12)
        assert run.report["upper_root"] == pytest.approx(0.762544822692871, abs=1e-12)
        assert run.report["sandwich_worst"] >= -1e-10
        assert run.report["sandwich_ok"]
        assert run.report["monotone_ok"]
        # successive gaps shrink to zero once the iteration locks in
        gaps = np.abs(np.diff(run.y0_series))
        assert gaps[-1] < gaps[0]
        assert gaps[-1] == 0.0
        assert run.lower_anchor is not None and run.upper_anchor is not None

    def test_certificates_recorded(self):
        prob = make_problem(
            f="indicator_pos(y)", pi="0", rate="1", barrier="-4",
            terminal="w1 + 0.2", T=0.25, N=4,
        )
        run = run_bracketing_sequence(prob, ns_count=2)
        certs = run.report["certificates"]
        assert certs["signed_growth_excess"] <= 1e-9
        assert certs["pi_worst"] <= 1e-9
        assert certs["g_worst"] <= 1e-9

    def test_needs_pi_and_rate(self):
        with pytest.raises(ConfigError, match="needs the increment modulus pi"):
            run_bracketing_sequence(make_problem(f="0", rate="1"))
        with pytest.raises(ConfigError, match="needs the dominating rate"):
            run_bracketing_sequence(make_problem(f="0", pi="0"))
        with pytest.raises(ConfigError, match="ns_count must be >= 1"):
            run_bracketing_sequence(
                make_problem(f="0", pi="0", rate="0"), ns_count=0
            )

    def test_signed_growth_certificate_gates(self):
        prob = make_problem(f="5*y", pi="0", rate="0", terminal="w1")
        with pytest.raises(ConfigError, match="signed growth certificate failed"):
            run_bracketing_sequence(prob)

    def test_negative_rate_rejected_on_the_grid(self):
        prob = make_problem(f="0", pi="0", rate="10*t - 0.01", terminal="w1")
        with pytest.raises(ConfigError, match="dominating rate f_t is negative"):
            run_bracketing_sequence(prob)

    def test_modulus_certificate_gates(self):
        prob = make_problem(f="0.1*y", pi="y", rate="1", terminal="w1")
        with pytest.raises(ConfigError, match="modulus certificate failed"):
            run_bracketing_sequence(prob)

    def test_contraction_certificate_gates(self):
        prob = make_problem(f="0", g="z1", pi="0", rate="0", terminal="w1")
        with pytest.raises(ConfigError, match="contraction certificate failed for g"):
            run_bracketing_sequence(prob)


class TestSequenceCsv:
    def test_envelope_rows(self):
        prob = make_problem(
            f="min(abs(y), 2)", terminal="w1", T=0.5, N=3, marks=MARKS
        )
        run = run_inf_envelope_sequence(prob, ENV, ns=[1, 2, 4])
        rows = list(sequence_csv_rows(run))
        assert rows[0] == ["n", "y0", "k_t_mean", "z_norm_sq", "u_norm_sq", "margin"]
        assert len(rows) == 1 + 3
        assert [r[0] for r in rows[1:]] == [1.0, 2.0, 4.0]
        assert [r[1] for r in rows[1:]] == run.y0_series
        assert rows[1][-1] == 0.0  # first row has no predecessor

    def test_bracketing_rows(self):
        prob = make_problem(
            f="indicator_pos(y)", pi="0", rate="1", barrier="-4",
            terminal="w1 + 0.2", T=0.25, N=4,
        )
        run = run_bracketing_sequence(prob, ns_count=3)
        rows = list(sequence_csv_rows(run))
        assert len(rows) == 1 + 3
        # first margin is against the lower anchor, not a dummy zero
        assert rows[1][-1] == run.report["pair_margins"][0]
