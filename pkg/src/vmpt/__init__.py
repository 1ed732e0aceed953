"""Variable-metric projection-type optimization with a phase-field compliance application."""
from .core import (InfeasibleStart, LineSearchFailure, SolverConfig, SolverTrace,
                   armijo_backtrack, check_descent, update_lambda, verify_trace, vmpt_solve)
from .fem import Elasticity, LoadCase, StiffnessModel, TriMesh
from .metrics import (LbfgsMemory, MetricFactory, MetricForm, lbfgs_update, make_h1_metric,
                      make_l2_metric, make_second_order_metric)
from .pdas import QPProblem, solve_projection, vi_residual
from .phasefield import FeasibleSet, PhaseFieldProblem, ProblemParams, project_feasible

__version__ = "0.1.0"
