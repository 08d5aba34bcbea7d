"""Three closed-form reflected equations solved on the exact tree.

A constant terminal value propagates unchanged, a unit drift adds the
remaining time, and a barrier decreasing to zero forces exactly one
unit of minimal push.  Each case prints its root next to the target.
"""

import numpy as np

from rbdsdep.drivers import MarkSpace, build_time_grid
from rbdsdep.generator import GeneratorSpec
from rbdsdep.solver import ProblemSpec, solve_tree_exact

grid = build_time_grid(1.0, 6)
marks = MarkSpace(np.array([1.0]), np.array([0.4]))

cases = [
    ("constant terminal", "0", "-10", "3", 3.0),
    ("unit drift", "1", "-10", "0", 1.0),
    ("binding barrier", "0", "1 - t", "0", 1.0),
]

for name, f, barrier, terminal, target in cases:
    prob = ProblemSpec(
        grid, 1, marks, GeneratorSpec(f=f, g="0"), barrier, terminal
    )
    sol = solve_tree_exact(prob).to_solution_grid()
    print(
        f"{name:18s}  Y0 = {sol.root_value():+.12f}  target {target:+.1f}"
        f"   K_T max = {sol.terminal_k().max():.12f}"
    )
