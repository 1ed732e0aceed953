"""One projection-type subproblem by hand.

The search direction is v = y - phi where y minimizes
1/2 a(y - phi, y - phi) + lambda <j'(phi), y - phi> over the feasible set.
Here it is built for the H1 metric and solved by the active-set method.
"""
import numpy as np

from vmpt.core import projection_qp
from vmpt.metrics import make_h1_metric
from vmpt.pdas import kkt_residual, solve_projection
from vmpt.phasefield import PhaseFieldProblem

problem = PhaseFieldProblem.cantilever(2.0 ** -3)
s = problem.initial_guess("random", seed=1)
g = problem.gradient(s)
metric = make_h1_metric(problem)

for lam in (1.0, 10.0, 100.0):
    qp = projection_qp(metric, g, s, problem.feasible_set, lam)
    v, state = solve_projection(qp)
    print(f"lambda {lam:6.1f}: {state.iter} active-set iterations, "
          f"{int(state.active.sum())} nodes at a bound, "
          f"<j', v> = {g @ v:.3e}, |v|_H = {problem.h_norm(v):.3e}, "
          f"KKT residual {kkt_residual(qp, v, state):.1e}")

# the mass row keeps the volume: v has zero mean
print("mean of v", float(problem.weights @ v))
