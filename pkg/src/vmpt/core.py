"""Variable-metric projection-type iteration.

    v_k = argmin_{y in Phi} 1/2 a_k(y - phi_k, y - phi_k) + lambda_k <j'(phi_k), y - phi_k>  - phi_k
    phi_{k+1} = phi_k + alpha_k v_k,   alpha_k = beta^m  (Armijo)

A problem provides ``feasible_set``, ``evaluate(s) -> (j, state)``,
``gradient(s)`` and the norms ``h_norm`` / ``scaled_h_norm``. A metric
factory provides ``build(problem, s, state) -> MetricForm``,
``observe(...)`` and ``default_lambda0(problem)``.
"""
import csv
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .pdas import QPProblem, solve_projection

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("k", "j", "slope", "norm_v", "alpha", "lambda", "backtracks", "pdas_iters")


class InfeasibleStart(ValueError):
    pass


class LineSearchFailure(RuntimeError):
    pass


class NotADescentDirection(ValueError):
    pass


class InvariantViolation(AssertionError):
    pass


@dataclass
class SolverConfig:
    beta: float = 0.5
    sigma: float = 1e-4
    tol: float = 1e-5
    k_max: int = 10000
    lambda0: float = None  # None: the metric's default
    lambda_min: float = None  # None: 1e-6 lambda0
    lambda_max: float = None  # None: 1e6 lambda0
    lambda_up: float = 1.0 / 0.75
    lambda_down: float = 0.75
    max_backtracks: int = 60
    adapt_lambda: bool = True
    stop_norm: str = "h"  # "h": ||v||_H, "scaled": sqrt(gamma eps) ||grad v||
    c_pdas: float = 1.0
    warm_start: bool = True
    strict: bool = False
    feas_tol: float = 1e-10

    def validate(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, float) and not math.isfinite(val):
                raise ValueError(f"{f.name} must be finite")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if self.tol < 0:
            raise ValueError("tol must be nonnegative")
        if self.k_max < 0 or self.max_backtracks < 1:
            raise ValueError("k_max must be >= 0 and max_backtracks >= 1")
        if self.stop_norm not in ("h", "scaled"):
            raise ValueError("stop_norm must be 'h' or 'scaled'")
        if self.lambda_up <= 0 or self.lambda_down <= 0:
            raise ValueError("lambda factors must be positive")
        lam = [x for x in (self.lambda_min, self.lambda0, self.lambda_max) if x is not None]
        if any(x <= 0 for x in lam):
            raise ValueError("lambda values must be positive")
        if lam != sorted(lam):
            raise ValueError("need lambda_min <= lambda0 <= lambda_max")
        return self

    def resolved(self, default_lambda0):
        """Copy with the lambda fields filled in."""
        lam0 = self.lambda0 if self.lambda0 is not None else default_lambda0
        out = SolverConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        out.lambda0 = lam0
        out.lambda_min = self.lambda_min if self.lambda_min is not None else 1e-6 * lam0
        out.lambda_max = self.lambda_max if self.lambda_max is not None else 1e6 * lam0
        out.lambda0 = min(max(lam0, out.lambda_min), out.lambda_max)
        return out.validate()


@dataclass
class SolverTrace:
    rows: list = field(default_factory=list)
    reason: str = ""
    c1: float = float("nan")
    sigma: float = float("nan")
    lambda_min: float = float("nan")
    lambda_max: float = float("nan")
    stop_values: list = field(default_factory=list)
    descent_flags: list = field(default_factory=list)
    feasibility: list = field(default_factory=list)

    @property
    def iterations(self):
        """Number of accepted steps."""
        return sum(1 for r in self.rows if np.isfinite(r[4]))

    def column(self, name):
        return np.array([r[TRACE_COLUMNS.index(name)] for r in self.rows], dtype=float)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(TRACE_COLUMNS)
            for r in self.rows:
                wr.writerow([int(r[0]), repr(float(r[1])), repr(float(r[2])), repr(float(r[3])),
                             repr(float(r[4])), repr(float(r[5])), int(r[6]), int(r[7])])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = tuple(next(rd))
            if header != TRACE_COLUMNS:
                raise ValueError(f"{path}: unexpected header {','.join(header)}")
            rows = []
            for line_no, rec in enumerate(rd, start=2):
                if len(rec) != len(TRACE_COLUMNS):
                    raise ValueError(f"{path}:{line_no}: expected {len(TRACE_COLUMNS)} fields")
                rows.append((int(rec[0]), *map(float, rec[1:6]), int(rec[6]), int(rec[7])))
        return cls(rows=rows)


def armijo_backtrack(fun, phi, v, slope, cfg, j0=None):
    """Smallest m with j(phi + beta^m v) <= j(phi) + beta^m sigma slope.

    Returns (alpha, m, j_new).
    """
    if not slope < 0:
        raise NotADescentDirection(f"directional derivative {slope:.3e} is not negative")
    j0 = fun(phi) if j0 is None else j0
    alpha = 1.0
    for m in range(cfg.max_backtracks + 1):
        j_new = fun(phi + alpha * v)
        if j_new <= j0 + alpha * cfg.sigma * slope:
            return alpha, m, j_new
        alpha *= cfg.beta
    raise LineSearchFailure(f"Armijo condition not met after {cfg.max_backtracks} backtracks")


def update_lambda(prev_lambda, prev_alpha, cfg):
    lam = prev_lambda * cfg.lambda_up if prev_alpha == 1.0 else prev_lambda * cfg.lambda_down
    return min(max(lam, cfg.lambda_min), cfg.lambda_max)


def check_descent(slope, norm_v, c1, lambda_max):
    """<j'(phi), v> <= -(c1 / lambda_max) ||v||^2, with 1e-10 (1 + |slope|) slack."""
    return slope <= -(c1 / lambda_max) * norm_v ** 2 + 1e-10 * (1.0 + abs(slope))


def projection_qp(metric, grad, s, fs, lam):
    """Subproblem in the increment v = y - s."""
    return QPProblem(metric, lam * np.asarray(grad), fs.lower - s, fs.upper - s,
                     weights=fs.weights, rhs=-float(fs.weights @ s))


def vmpt_solve(problem, metric_factory, cfg=None, phi0=None, callback=None):
    """Runs the iteration from ``phi0``; returns (phi, SolverTrace)."""
    cfg = (cfg or SolverConfig()).validate()
    cfg = cfg.resolved(metric_factory.default_lambda0(problem))
    fs = problem.feasible_set
    s = np.zeros(len(fs.lower)) if phi0 is None else np.array(phi0, dtype=float)
    viol = fs.violation(s)
    if viol > cfg.feas_tol:
        raise InfeasibleStart(f"initial guess violates the constraints by {viol:.3e}")

    trace = SolverTrace(sigma=cfg.sigma, lambda_min=cfg.lambda_min, lambda_max=cfg.lambda_max)
    stop_norm = problem.h_norm if cfg.stop_norm == "h" else problem.scaled_h_norm
    lam = cfg.lambda0
    j, state = problem.evaluate(s)
    g = problem.gradient(s)
    warm = None

    def fun(x):
        return problem.evaluate(x)[0]

    k = 0
    while True:
        metric = metric_factory.build(problem, s, state)
        trace.c1 = metric.c1
        qp = projection_qp(metric, g, s, fs, lam)
        v, warm_new = solve_projection(qp, c_pdas=cfg.c_pdas,
                                       warm=warm if cfg.warm_start else None)
        warm = warm_new
        norm_v = metric.norm(v)
        slope = float(g @ v)
        stop_val = stop_norm(v)
        trace.stop_values.append(stop_val)

        if stop_val <= cfg.tol or k >= cfg.k_max:
            trace.rows.append((k, j, slope, norm_v, float("nan"), lam, 0, warm.iter))
            trace.reason = "tolerance" if stop_val <= cfg.tol else "k_max"
            break

        ok = check_descent(slope, norm_v, metric.c1, cfg.lambda_max)
        trace.descent_flags.append(ok)
        if not ok:
            msg = f"iteration {k}: descent inequality violated (slope {slope:.3e}, |v| {norm_v:.3e})"
            if cfg.strict:
                raise InvariantViolation(msg)
            log.warning(msg)

        try:
            alpha, m, j_new = armijo_backtrack(fun, s, v, slope, cfg, j0=j)
        except (LineSearchFailure, NotADescentDirection) as exc:
            log.warning("iteration %d: %s", k, exc)
            trace.rows.append((k, j, slope, norm_v, float("nan"), lam, cfg.max_backtracks,
                               warm.iter))
            trace.reason = "line_search_failure"
            break
        trace.rows.append((k, j, slope, norm_v, alpha, lam, m, warm.iter))

        s_new = s + alpha * v
        feas = fs.violation(s_new)
        trace.feasibility.append(feas)
        if cfg.strict:
            if feas > cfg.feas_tol:
                raise InvariantViolation(f"iteration {k}: iterate infeasible by {feas:.3e}")
            if not j_new < j:
                raise InvariantViolation(f"iteration {k}: no decrease ({j_new!r} >= {j!r})")
        _, state = problem.evaluate(s_new)
        g_new = problem.gradient(s_new)
        metric_factory.observe(s, g, s_new, g_new)
        s, j, g = s_new, j_new, g_new
        if cfg.adapt_lambda:
            lam = update_lambda(lam, alpha, cfg)
        k += 1
        if callback is not None:
            callback(k, s, trace)
        if k % 50 == 0:
            log.info("k=%d j=%.10g |v|=%.3e lambda=%.3e", k, j, norm_v, lam)
    return s, trace


def verify_trace(trace, strict_decrease=True):
    """Post-hoc checks of a trace. Returns a list of violation messages.

    Rows with alpha = nan mark the terminating iteration. Lambda bounds,
    descent (with c1) and the Armijo fraction are checked when the trace
    carries them.
    """
    problems = []
    rows = trace.rows
    for i, r in enumerate(rows):
        k, j, slope, norm_v, alpha, lam, m, _ = r
        if not math.isfinite(j):
            problems.append(f"k={k}: non-finite j")
        if not lam > 0:
            problems.append(f"k={k}: lambda {lam} not positive")
        if math.isfinite(trace.lambda_min) and not trace.lambda_min * (1 - 1e-12) <= lam <= trace.lambda_max * (1 + 1e-12):
            problems.append(f"k={k}: lambda {lam} outside [{trace.lambda_min}, {trace.lambda_max}]")
        if not math.isfinite(alpha):
            continue
        if norm_v > 0 and not slope < 0:
            problems.append(f"k={k}: slope {slope} not negative")
        if not 0 < alpha <= 1:
            problems.append(f"k={k}: alpha {alpha} outside (0, 1]")
        if math.isfinite(trace.c1) and not check_descent(slope, norm_v, trace.c1, trace.lambda_max):
            problems.append(f"k={k}: descent inequality violated")
        if i + 1 < len(rows):
            j_next = rows[i + 1][1]
            if strict_decrease and norm_v > 0 and not j_next < j:
                problems.append(f"k={k}: j not decreasing ({j_next!r} >= {j!r})")
            if math.isfinite(trace.sigma) and j_next > j + alpha * trace.sigma * slope + 1e-13 * abs(j):
                problems.append(f"k={k}: Armijo condition violated")
    if any(f > 1e-10 for f in trace.feasibility):
        problems.append(f"max infeasibility {max(trace.feasibility):.3e} > 1e-10")
    return problems


class QuadraticProblem:
    """j(s) = 1/2 s^T H s + g^T s on a FeasibleSet-like object; for testing and demos."""

    def __init__(self, H, g, feasible_set, norm_matrix=None):
        self.H = H
        self.g = np.asarray(g, dtype=float)
        self.feasible_set = feasible_set
        self.norm_matrix = H if norm_matrix is None else norm_matrix

    def evaluate(self, s):
        s = np.asarray(s)
        return 0.5 * float(s @ (self.H @ s)) + float(self.g @ s), None

    def gradient(self, s):
        return self.H @ np.asarray(s) + self.g

    def h_norm(self, v):
        return float(np.sqrt(max(float(v @ (self.norm_matrix @ v)), 0.0)))

    scaled_h_norm = h_norm


class FixedMetric:
    """Factory returning the same MetricForm at every iterate."""

    def __init__(self, form, lambda0=1.0):
        self.form = form
        self.lambda0 = lambda0

    def default_lambda0(self, problem):
        return self.lambda0

    def build(self, problem, s, state):
        return self.form

    def observe(self, *args):
        pass
