"""Metric forms a_k for the projection subproblem.

Each form acts on the scalar field s through its two-component view
(s, -s), so the H^1 form is 2 S and the L^2 form is 2 M with S, M the
scalar P1 stiffness and mass matrices.
"""
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

KINDS = ("l2", "h1", "scaled_h1", "second_order", "lbfgs")


class NonPositiveMetric(RuntimeError):
    pass


@dataclass
class MetricForm:
    """Sparse part + optional low-rank part ``W diag(d) W^T`` + optional implicit part.

    ``norm`` is the norm used by the descent check and ``c1`` the
    coercivity constant relative to that norm.
    """
    kind: str
    matrix: object
    c1: float
    norm: object
    lowrank: tuple = None
    implicit: object = None
    inner_solver: str = "direct"  # "cg": Jacobi CG inside the subproblem

    def apply(self, x):
        out = self.matrix @ x
        if self.lowrank is not None:
            W, d = self.lowrank
            out = out + W @ (d * (W.T @ x))
        if self.implicit is not None:
            out = out + self.implicit(x)
        return out

    def form(self, p, y):
        return float(np.asarray(p) @ self.apply(y))

    def energy_norm(self, v):
        Av = self.apply(v)
        val = float(np.asarray(v) @ Av)
        if val < 0 and val < -1e-12 * float(np.abs(v) @ (abs(self.matrix) @ np.abs(v))):
            raise NonPositiveMetric(f"a(v, v) = {val:.3e} < 0")
        return float(np.sqrt(max(val, 0.0)))


def make_h1_metric(problem, scale=1.0, kind=None):
    """scale * (grad p, grad y); definite on the mean-free subspace only."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    kind = kind or ("h1" if scale == 1.0 else "scaled_h1")
    return MetricForm(kind, (2.0 * scale) * problem.stiff, float(scale), problem.h_norm)


def make_l2_metric(problem):
    """Mass-matrix form. Its c1 = 1 refers to the discrete L^2 norm, which is
    also the norm used for the descent check; it is not an H^1 bound."""
    return MetricForm("l2", 2.0 * problem.mass, 1.0, problem.l2_norm, inner_solver="cg")


class SecondOrderTerms:
    """Compliance curvature terms at a fixed state: G, K^{-1} and both evaluations."""

    def __init__(self, problem, state):
        self.problem = problem
        self.state = state
        self.el = problem.elasticity
        self.G = self.el.coupling(state)

    def z(self, p):
        return self.el.solve_linearized_state(self.state, p, self.G)

    def curvature(self, x):
        """2 G^T K^{-1} G x, i.e. 2 int C E(z_x):E(z_.) as a dual vector."""
        return -2.0 * (self.G.T @ self.z(x))

    def akso2(self, p, y):
        zp, zy = self.z(p), self.z(y)
        K = self.state.K
        return 2.0 * float(zp @ (K @ zy))

    def akso_cross(self, p, y):
        """-2 int C'(c) y E(z_p):E(u) by direct element integration."""
        el = self.el
        zp = self.z(p)
        ez = np.einsum("tij,tj->ti", el.B, zp[el.edofs])
        eu = np.einsum("tij,tj->ti", el.B, self.state.u[el.edofs])
        dD = el.stiffness.d_hard - el.stiffness.d_soft
        dq = el.stiffness.dq(el.centroid_values(self.state.c))
        ybar = el.centroid_values(y)
        dens = np.einsum("ti,ij,tj->t", ez, dD, eu)
        return -2.0 * float(np.sum(self.problem.mesh.area * dq * ybar * dens))


    def curvature_matrix(self):
        """Dense 2 G^T K^{-1} G from one block solve with the stored factor."""
        Z = self.el.solve_linearized_state(self.state, np.eye(self.problem.n), self.G)
        C = -2.0 * (self.G.T @ Z)
        return 0.5 * (C + C.T)


def make_second_order_metric(problem, state, dense_limit=4000):
    """gamma eps (p, y)_H + 2 int C(c) E(z_p):E(z_y).

    The linearized states reuse the factorization stored in ``state``. Up
    to ``dense_limit`` nodes the curvature part is assembled as a dense
    matrix; CG preconditioned by the H^1 part converges slowly when gamma eps
    is small. Above it the part is applied matrix-free.
    """
    p = problem.params
    ge = p.gamma * p.epsilon
    terms = SecondOrderTerms(problem, state)
    base = (2.0 * ge) * problem.stiff
    if problem.n <= dense_limit:
        form = MetricForm("second_order", base.toarray() + terms.curvature_matrix(), ge,
                          problem.h_norm)
    else:
        form = MetricForm("second_order", base, ge, problem.h_norm, implicit=terms.curvature)
    form.terms = terms
    return form


class LbfgsMemory:
    """Ring buffer of (p, y) pairs; oldest pair is evicted beyond ``depth``."""

    def __init__(self, depth=10, skip_tol=1e-12):
        self.depth = depth
        self.skip_tol = skip_tol
        self.pairs = deque(maxlen=depth)
        self.skipped = 0

    def __len__(self):
        return len(self.pairs)


def lbfgs_update(memory, p, y):
    """Store (p, y) if <y, p> > skip_tol |y| |p|; returns the memory."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if float(y @ p) > memory.skip_tol * np.linalg.norm(y) * np.linalg.norm(p):
        memory.pairs.append((p.copy(), y.copy()))
    else:
        memory.skipped += 1
    return memory


def lbfgs_lowrank(base, pairs):
    """Compact form of the recursion

        a_{i+1}(u, v) = a_i(u, v) - a_i(p_i, u) a_i(p_i, v) / a_i(p_i, p_i)
                        + <y_i, u> <y_i, v> / <y_i, p_i>

    as ``(W, d)`` with a_k = base + W diag(d) W^T. The vectors B_i p_i are
    rebuilt from the base each time so eviction needs no bookkeeping.
    """
    if not pairs:
        return None
    n = base.shape[0]
    W = np.zeros((n, 2 * len(pairs)))
    d = np.zeros(2 * len(pairs))
    for i, (p, y) in enumerate(pairs):
        Bp = base @ p
        if i:
            Wi, di = W[:, :2 * i], d[:2 * i]
            Bp = Bp + Wi @ (di * (Wi.T @ p))
        W[:, 2 * i] = Bp
        d[2 * i] = -1.0 / float(p @ Bp)
        W[:, 2 * i + 1] = y
        d[2 * i + 1] = 1.0 / float(y @ p)
    return W, d


def make_lbfgs_metric(problem, memory):
    """gamma eps (., .)_H updated by the stored pairs. The descent check uses
    the form's own norm with c1 = 1, since no uniform H^1 bound exists."""
    p = problem.params
    base = (2.0 * p.gamma * p.epsilon) * problem.stiff
    form = MetricForm("lbfgs", base, 1.0, None, lowrank=lbfgs_lowrank(base, memory.pairs))
    form.norm = form.energy_norm
    return form


class MetricFactory:
    """Builds a_k for iterate k. ``observe`` receives each accepted step."""

    def __init__(self, kind="h1", depth=10):
        if kind not in KINDS:
            raise ValueError(f"unknown metric {kind!r}; expected one of {', '.join(KINDS)}")
        self.kind = kind
        self.memory = LbfgsMemory(depth) if kind == "lbfgs" else None
        self._fixed = None

    def default_lambda0(self, problem):
        """0.005 / (gamma eps) for the unscaled forms, 0.005 for those already
        carrying the factor gamma eps (the same iterates in both scalings)."""
        ge = problem.params.gamma * problem.params.epsilon
        return 0.005 / ge if self.kind in ("l2", "h1") else 0.005

    def build(self, problem, s, state):
        if self.kind in ("h1", "scaled_h1", "l2"):
            # state-independent: build once per problem
            if self._fixed is None or self._fixed[0] is not problem:
                self._fixed = (problem, self._make(problem, s, state))
            return self._fixed[1]
        return self._make(problem, s, state)

    def _make(self, problem, s, state):
        if self.kind == "h1":
            return make_h1_metric(problem, 1.0)
        if self.kind == "scaled_h1":
            pr = problem.params
            return make_h1_metric(problem, pr.gamma * pr.epsilon, "scaled_h1")
        if self.kind == "l2":
            return make_l2_metric(problem)
        if self.kind == "second_order":
            # linearized states need the factorization of K at this iterate
            return make_second_order_metric(problem, problem.state(s, exact=True))
        return make_lbfgs_metric(problem, self.memory)

    def observe(self, s_old, g_old, s_new, g_new):
        if self.memory is not None:
            lbfgs_update(self.memory, s_new - s_old, g_new - g_old)


def is_symmetric(A, tol=1e-12):
    A = sp.csr_matrix(A)
    diff = abs(A - A.T).max() if A.nnz else 0.0
    return diff <= tol * max(abs(A).max() if A.nnz else 0.0, 1.0)
