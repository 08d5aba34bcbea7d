"""Expression DSL and Lipschitz envelopes for a discontinuous driver.

Drivers, barriers, and terminal data are plain arithmetic expressions.
Grid inf-convolution regularizes a jump discontinuity from below and
sup-convolution from above; both collapse onto the function wherever it
is already n-Lipschitz.
"""

import numpy as np

from rbdsdep.expr import EvalContext, evaluate, parse_expr, to_string, variables
from rbdsdep.generator import EnvelopeFunction, EnvelopeParams, envelope_table

expr = parse_expr("indicator_pos(y) + 0.5*max(y, 0)")
print("parsed      ", to_string(expr))
print("variables   ", sorted(variables(expr)))
vals = [float(evaluate(expr, EvalContext(t=0.0, y=y))) for y in (-1.0, 0.0, 2.0)]
print("value at -1, 0, 2:", vals)

params = EnvelopeParams(n=4.0, box={"y": (-2.0, 2.0)}, grid_points=17)
rows = list(envelope_table("indicator_pos(y)", params, kind="inf"))
print()
print("inf-envelope of the step function at n = 4")
print("  ".join(f"{c:>8s}" for c in rows[0]))
for row in rows[1:]:
    print("  ".join(f"{v:+8.4f}" for v in row))

inf = EnvelopeFunction("indicator_pos(y)", params, "inf")
sup = EnvelopeFunction("indicator_pos(y)", params, "sup")
print()
print("bracket around the jump:")
for y in np.linspace(-0.5, 0.5, 5):
    lo, hi = inf(0.0, float(y)), sup(0.0, float(y))
    print(f"  y = {y:+.2f}   {lo:.4f} <= f(y) <= {hi:.4f}")
