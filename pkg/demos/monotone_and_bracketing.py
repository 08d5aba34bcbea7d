"""Monotone driver approximation with certified error brackets.

For a continuous non-Lipschitz driver the inf-envelope sequence rises
toward the solution and stays below a linear-growth upper bound.  For a
discontinuous driver the fixed-point iterates sit between lower and
upper comparison anchors, node for node.
"""

from rbdsdep.drivers import build_time_grid, empty_marks
from rbdsdep.generator import EnvelopeParams, GeneratorSpec
from rbdsdep.schemes import (
    run_bracketing_sequence,
    run_inf_envelope_sequence,
    sequence_csv_rows,
)
from rbdsdep.solver import ProblemSpec

sqrt_prob = ProblemSpec(
    build_time_grid(0.5, 4), 1, empty_marks(),
    GeneratorSpec(f="sqrt(abs(y))", g="0", growth_C=2.0), "-6", "0.5*w1",
)
env = EnvelopeParams(n=16.0, box={"y": (-6.0, 6.0)}, grid_points=201)
run = run_inf_envelope_sequence(sqrt_prob, env, threads=2)
print("square-root driver, inf-envelope sequence:")
for row in sequence_csv_rows(run):
    print("   ", row)
print(f"    upper bound V0 = {run.report['v_root']:.6f}")

step_prob = ProblemSpec(
    build_time_grid(0.25, 4), 1, empty_marks(),
    GeneratorSpec(f="indicator_pos(y)", g="0", pi="0", rate="1"),
    "-4", "w1 + 0.2",
)
bra = run_bracketing_sequence(step_prob, ns_count=5)
print()
print("step driver, bracketing iterates:")
print(f"    lower anchor  {bra.report['lower_root']:+.6f}")
for n, y0 in zip(bra.index_set, bra.y0_series):
    print(f"    iterate {n}     {y0:+.6f}")
print(f"    upper anchor  {bra.report['upper_root']:+.6f}")
print(f"    worst sandwich margin {bra.report['sandwich_worst']:.3e}")
