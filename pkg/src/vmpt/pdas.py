"""Primal-dual active-set solver for the projection subproblem.

    min 1/2 y^T A y + b^T y   s.t.   lower <= y <= upper,  w^T y = r

A is symmetric positive definite on {w^T y = 0}. It is given either as a
sparse/dense matrix or as an object exposing ``matrix`` (sparse part),
``lowrank`` (``(W, d)`` meaning ``W diag(d) W^T``, or None) and ``implicit``
(a callable applying any remaining symmetric term, or None).

KKT convention: ``A y + b + nu w - mu = 0`` with mu >= 0 on lower-active
nodes, mu <= 0 on upper-active nodes and mu = 0 on inactive nodes.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import splu


class SubproblemFailure(RuntimeError):
    pass


class MaxPdasIterations(SubproblemFailure):
    pass


class IndefiniteOperator(SubproblemFailure):
    pass


DENSE_MIN_FILL = 0.3


def _as_operator_matrix(A):
    """Mostly full arrays stay dense (LAPACK inner solves), the rest become CSR."""
    if isinstance(A, np.ndarray) and A.ndim == 2 and A.size and \
            np.count_nonzero(A) >= DENSE_MIN_FILL * A.size:
        return np.asarray(A, dtype=float)
    return sp.csr_matrix(A)


class _DenseLU:
    def __init__(self, M):
        self._f = lu_factor(M, check_finite=False)
        piv = np.abs(np.diag(self._f[0]))
        if piv.min(initial=1.0) <= 1e3 * np.finfo(float).eps * max(piv.max(initial=0.0), 1e-300):
            raise IndefiniteOperator("inner dense factorization is singular")

    def solve(self, rhs):
        return lu_solve(self._f, rhs, check_finite=False)


class _Operator:
    """Sparse part + optional low-rank part + optional implicit part (+ optional rho w w^T)."""

    def __init__(self, A):
        self.rank1 = None
        self.inner = getattr(A, "inner_solver", "direct")
        if isinstance(A, _Operator):
            self.matrix, self.lowrank, self.implicit = A.matrix, A.lowrank, A.implicit
            self.rank1 = A.rank1
            self.source = A.source
        elif sp.issparse(A) or isinstance(A, np.ndarray):
            self.source = A
            self.matrix = _as_operator_matrix(A)
            self.lowrank = None
            self.implicit = None
        else:
            self.source = A.matrix
            self.matrix = _as_operator_matrix(A.matrix)
            self.lowrank = getattr(A, "lowrank", None)
            self.implicit = getattr(A, "implicit", None)

    def apply(self, x):
        out = self.matrix @ x
        if self.lowrank is not None:
            W, d = self.lowrank
            out = out + W @ (d * (W.T @ x))
        if self.implicit is not None:
            out = out + self.implicit(x)
        if self.rank1 is not None:
            w, rho = self.rank1
            out = out + rho * w * float(w @ x)
        return out

    def diagonal(self):
        diag = self.matrix.diagonal().copy()
        if self.lowrank is not None:
            W, d = self.lowrank
            diag += (W * W) @ d
        if self.rank1 is not None:
            w, rho = self.rank1
            diag += rho * w * w
        return diag


@dataclass
class QPProblem:
    A: object
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    weights: np.ndarray = None
    rhs: float = 0.0

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        n = len(self.b)
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound above upper bound")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
        self.op = _Operator(self.A)
        if self.op.matrix.shape != (n, n):
            raise ValueError("operator and linear term have mismatched sizes")

    @property
    def n(self):
        return len(self.b)

    def objective(self, y):
        return 0.5 * float(y @ self.op.apply(y)) + float(self.b @ y)

    def gradient(self, y):
        return self.op.apply(y) + self.b

    def violation(self, y):
        box = max(np.max(self.lower - y, initial=0.0), np.max(y - self.upper, initial=0.0))
        if self.weights is None:
            return box
        return max(box, abs(float(self.weights @ y) - self.rhs) / float(np.sum(np.abs(self.weights))))


@dataclass
class ActiveSetState:
    lower_active: np.ndarray
    upper_active: np.ndarray
    mu: np.ndarray
    nu: float = 0.0
    iter: int = 0
    history: list = field(default_factory=list, repr=False)
    fallback: bool = False

    @property
    def active(self):
        return self.lower_active | self.upper_active


class _ReducedSolver:
    """Solves the system restricted to the inactive index set.

    With a hard mass row the matrix is bordered by ``w_I`` with a zero
    corner; an augmentation ``rho w w^T`` is bordered with corner -1/rho,
    which keeps the factorization nonsingular when the sparse part is only
    semidefinite.
    """

    def __init__(self, op, inactive, weights, cg_tol=1e-13, cg_maxiter=2000):
        self.op = op
        self.I = np.flatnonzero(inactive)
        self.cg_tol = cg_tol
        self.cg_maxiter = cg_maxiter
        self.cg_iters = 0
        nI = len(self.I)
        dense = isinstance(op.matrix, np.ndarray)
        if nI < op.matrix.shape[0]:
            S = op.matrix[np.ix_(self.I, self.I)] if dense else op.matrix[self.I][:, self.I]
        else:
            S = op.matrix
        self.hard = weights is not None
        if self.hard:
            border, corner = weights[self.I], 0.0
        elif op.rank1 is not None:
            border, corner = op.rank1[0][self.I], -1.0 / op.rank1[1]
        else:
            border = None
        self.border = border
        if dense:
            if border is not None:
                S = np.block([[S, border[:, None]], [border[None, :], np.array([[corner]])]])
            self.size = S.shape[0]
            self._lu = _DenseLU(S)
        else:
            perm = "MMD_AT_PLUS_A"
            if border is not None:
                S = sp.bmat([[S, border[:, None]], [border[None, :], np.array([[corner]])]],
                            format="csc")
                perm = "COLAMD"  # minimum degree orderings are slow with a dense border
            self.size = S.shape[0]
            try:
                self._lu = splu(sp.csc_matrix(S), permc_spec=perm,
                                diag_pivot_thresh=0.1, options={"SymmetricMode": True})
            except RuntimeError as exc:
                raise IndefiniteOperator(f"inner factorization failed: {exc}") from exc
        self._cap = None
        if op.lowrank is not None:
            W, d = op.lowrank
            U = np.zeros((self.size, W.shape[1]))
            U[:nI] = W[self.I]
            KU = self._lu.solve(U)
            cap = np.diag(1.0 / d) + U.T @ KU
            self._U, self._KU, self._cap = U, KU, cap

    def _direct(self, rhs):
        x = self._lu.solve(rhs)
        if self._cap is not None:
            x = x - self._KU @ np.linalg.solve(self._cap, self._U.T @ x)
        if not np.all(np.isfinite(x)):
            raise IndefiniteOperator("non-finite inner solution")
        return x

    def _extend(self, r, last=0.0):
        return np.concatenate([r, [last]]) if self.border is not None else r

    def solve(self, rhs_I, rhs_w=0.0):
        """Returns (y_I, nu); nu is only meaningful with a hard mass row."""
        nI = len(self.I)
        x = self._direct(self._extend(rhs_I, rhs_w if self.hard else 0.0))
        y = x[:nI]
        nu = float(x[nI]) if self.hard else 0.0
        if self.op.implicit is not None:
            y, nu = self._pcg(y, rhs_I)
        return y, nu

    def _apply_I(self, yI):
        full = np.zeros(self.op.matrix.shape[0])
        full[self.I] = yI
        return self.op.apply(full)[self.I]

    def _precondition(self, r):
        return self._direct(self._extend(r))[: len(self.I)]

    def _pcg(self, y0, rhs_I):
        """CG preconditioned by the explicit part; stays on the mass manifold when it is hard."""
        y = y0.copy()
        r = self._apply_I(y) - rhs_I
        g = self._precondition(r)
        rg = float(r @ g)
        if rg < 0:
            raise IndefiniteOperator("preconditioner not positive definite")
        ref = max(abs(float(rhs_I @ self._precondition(rhs_I))), rg, 1e-300)
        d = -g
        it = 0
        while rg > self.cg_tol ** 2 * ref and it < self.cg_maxiter:
            Ad = self._apply_I(d)
            curv = float(d @ Ad)
            if curv <= 0:
                raise IndefiniteOperator("operator not positive definite on the inactive subspace")
            alpha = rg / curv
            y += alpha * d
            r += alpha * Ad
            g = self._precondition(r)
            rg_new = float(r @ g)
            d = -g + (rg_new / rg) * d
            rg = rg_new
            it += 1
        self.cg_iters = it
        if rg > (1e3 * self.cg_tol) ** 2 * ref:
            raise SubproblemFailure(f"preconditioned CG stalled after {it} iterations")
        nu = 0.0
        if self.hard:
            wI = self.border
            r = self._apply_I(y) - rhs_I
            nu = -float(wI @ r) / float(wI @ wI)
        return y, nu


class _JacobiSolver:
    """Projected Jacobi-preconditioned CG for well-conditioned sparse parts
    (mass matrices). Same interface as _ReducedSolver."""

    def __init__(self, op, inactive, weights, tol=1e-13, maxiter=500):
        self.I = np.flatnonzero(inactive)
        self.A = op.matrix[self.I][:, self.I] if len(self.I) < op.matrix.shape[0] else op.matrix
        self.dinv = 1.0 / self.A.diagonal()
        if np.any(~np.isfinite(self.dinv)) or np.any(self.dinv <= 0):
            raise IndefiniteOperator("non-positive diagonal")
        self.w = None if weights is None else weights[self.I]
        self.tol = tol
        self.maxiter = maxiter
        self.cg_iters = 0

    def solve(self, rhs_I, rhs_w=0.0):
        A, w, dinv = self.A, self.w, self.dinv
        if w is None:
            y = dinv * rhs_I
        else:
            dw = dinv * w
            wdw = float(w @ dw)
            y = dw * (rhs_w / wdw)
        nu = 0.0
        r = A @ y - rhs_I
        if w is not None:
            # keep the multiplier out of the residual, otherwise its size
            # sets the round-off floor
            shift = float(dw @ r) / wdw
            r -= shift * w
            nu -= shift
        g = dinv * r
        rg = float(r @ g)
        d = -g
        it = 0
        ref = max(float(np.linalg.norm(rhs_I)), 1e-300)
        while np.linalg.norm(r) > self.tol * max(ref, float(np.linalg.norm(A @ y))):
            if it >= self.maxiter:
                raise SubproblemFailure(f"Jacobi CG stalled after {it} iterations")
            Ad = A @ d
            curv = float(d @ Ad)
            if curv <= 0:
                raise IndefiniteOperator("operator not positive definite on the inactive subspace")
            alpha = rg / curv
            y += alpha * d
            r += alpha * Ad
            if w is not None:
                shift = float(dw @ r) / wdw
                r -= shift * w
                nu -= shift
            g = dinv * r
            rg_new = float(r @ g)
            d = -g + (rg_new / rg) * d
            rg = rg_new
            it += 1
        self.cg_iters = it
        return y, nu


RHO_SCALE = 1e-6  # small: keeps the augmented box problem close to A itself

_CACHE_SIZE = 8
_cache = []


def _reduced_solver(op, inactive, weights):
    """Factorizations of purely sparse operators are reused when the same
    matrix object meets the same inactive set again (warm starts, repeated
    metrics)."""
    if op.lowrank is not None or op.implicit is not None or op.rank1 is not None:
        return _ReducedSolver(op, inactive, weights)
    if op.inner == "cg":
        return _JacobiSolver(op, inactive, weights)
    key = inactive.tobytes()
    for entry in _cache:
        src, w, k, solver = entry
        if src is op.source and w is weights and k == key:
            return solver
    solver = _ReducedSolver(op, inactive, weights)
    _cache.insert(0, (op.source, weights, key, solver))
    del _cache[_CACHE_SIZE:]
    return solver


def clear_cache():
    _cache.clear()


def _predict(mu, y, lower, upper, c):
    la = mu + c * (lower - y) > 0
    ua = (mu + c * (upper - y) < 0) & ~la
    return la, ua


def _violators(y, mu, la, ua, lower, upper, tol):
    """Indices breaking primal feasibility (inactive) or multiplier sign (active)."""
    inactive = ~(la | ua)
    bad = inactive & ((y < lower - tol) | (y > upper + tol))
    bad |= la & (mu < -tol)
    bad |= ua & (mu > tol)
    return np.flatnonzero(bad)


def _single_pivot(idx, y, mu, la, ua, lower, upper, weights):
    """Flip one index.

    If ``idx`` is the last free node of a mass-constrained problem it is
    swapped with the active node on the opposite side whose multiplier per
    unit mass is closest to zero, so the mass row keeps a free node.
    """
    la, ua = la.copy(), ua.copy()
    free = ~(la | ua)
    if not free[idx]:
        la[idx] = ua[idx] = False
        return la, ua
    to_lower = y[idx] < lower[idx]
    if weights is not None and np.count_nonzero(free) == 1:
        cand = np.flatnonzero(ua if to_lower else la)
        cand = cand[cand != idx]
        if len(cand) == 0:
            return None
        ratio = mu[cand] / weights[cand]
        j = cand[np.argmax(ratio)] if to_lower else cand[np.argmin(ratio)]
        la[j] = ua[j] = False
    if to_lower:
        la[idx] = True
    else:
        ua[idx] = True
    return la, ua


def _pdas(qp, c, la, ua, max_iter, block_tries, tol):
    op = qp.op
    w = qp.weights
    fixed_eq = qp.lower == qp.upper
    history = []
    best = np.inf
    tries = block_tries
    for it in range(1, max_iter + 1):
        inactive = ~(la | ua)
        y = np.where(la, qp.lower, np.where(ua, qp.upper, 0.0))
        nu = 0.0
        if np.any(inactive):
            solver = _reduced_solver(op, inactive, w)
            Ay_fixed = op.apply(y)
            rhs_I = -qp.b[inactive] - Ay_fixed[inactive]
            rhs_w = 0.0
            if w is not None:
                rhs_w = qp.rhs - float(w[~inactive] @ y[~inactive])
            yI, nu = solver.solve(rhs_I, rhs_w)
            y[inactive] = yI
        grad = op.apply(y) + qp.b
        if w is not None and not np.any(inactive):
            nu = -float(w @ grad) / float(w @ w)
        mu = grad + nu * w if w is not None else grad
        mu[inactive] = 0.0

        viol = _violators(y, mu, la, ua, qp.lower, qp.upper, tol)
        history.append(len(viol))
        mass_ok = w is None or abs(float(w @ y) - qp.rhs) <= tol * float(np.sum(np.abs(w)))
        if len(viol) == 0 and mass_ok:
            return y, ActiveSetState(la, ua, mu, nu, it, history)

        # Judice-Pires safeguard: block updates while the violator count improves
        if len(viol) < best:
            best, tries = len(viol), block_tries
            use_block = True
        elif tries > 0:
            tries -= 1
            use_block = True
        else:
            use_block = False

        if use_block:
            la_new, ua_new = _predict(mu, y, qp.lower, qp.upper, c)
            la_new |= fixed_eq
            ua_new &= ~fixed_eq
            if w is not None and not np.any(~(la_new | ua_new)):
                use_block = False
            else:
                la, ua = la_new, ua_new
        if not use_block:
            for idx in viol[::-1]:
                flipped = _single_pivot(idx, y, mu, la, ua, qp.lower, qp.upper, w)
                if flipped is not None:
                    la, ua = flipped
                    break
            else:
                raise MaxPdasIterations("no admissible pivot")
    raise MaxPdasIterations(f"no active-set convergence in {max_iter} iterations")


def _initial_sets(qp, y, c, warm):
    n = qp.n
    fixed_eq = qp.lower == qp.upper
    if warm is not None and len(warm.lower_active) == n:
        la, ua = warm.lower_active.copy(), warm.upper_active.copy()
    else:
        la, ua = _predict(np.zeros(n), y, qp.lower, qp.upper, c)
    la |= fixed_eq
    ua &= ~(fixed_eq | la)
    if qp.weights is not None and not np.any(~(la | ua)) and np.any(~fixed_eq):
        j = int(np.flatnonzero(~fixed_eq)[0])
        la[j] = ua[j] = False
    return la, ua


def _solve_by_mass_multiplier(qp, y, c_pdas, max_iter, block_tries):
    """Fallback: root-find the mass multiplier with a box-only PDAS inside.

    With A_aug = A + rho w w^T the box problem at fixed nu is strictly
    convex and w^T y(nu) is nonincreasing in nu, so the root is bracketed
    by expansion and located by Brent's method.
    """
    w = qp.weights
    op = _Operator(qp.op)
    rho = RHO_SCALE * float(np.mean(qp.op.diagonal())) / float(np.mean(w * w))
    op.rank1 = (w, rho)
    c = c_pdas * np.maximum(op.diagonal(), 1e-300)
    tol = 1e-12 * (1.0 + float(np.max(np.abs(qp.b), initial=0.0)))
    cache = {}

    def inner(nu):
        box = QPProblem(op, qp.b + nu * w - rho * qp.rhs * w, qp.lower, qp.upper)
        sets = cache.get("sets") or _initial_sets(box, y, c, None)
        yy, st = _pdas(box, c, *sets, max_iter, block_tries, tol)
        cache["sets"] = (st.lower_active, st.upper_active)
        return yy, st

    def excess(nu):
        return float(w @ inner(nu)[0]) - qp.rhs

    lo_nu, hi_nu = -1.0, 1.0
    f_lo, f_hi = excess(lo_nu), excess(hi_nu)
    k = 0
    while f_lo < 0 and k < 200:
        hi_nu, f_hi = lo_nu, f_lo
        lo_nu *= 4.0
        f_lo = excess(lo_nu)
        k += 1
    while f_hi > 0 and k < 400:
        lo_nu, f_lo = hi_nu, f_hi
        hi_nu *= 4.0
        f_hi = excess(hi_nu)
        k += 1
    if f_lo < 0 or f_hi > 0:
        raise MaxPdasIterations("mass multiplier could not be bracketed (infeasible mass?)")
    nu = brentq(excess, lo_nu, hi_nu, xtol=1e-300, rtol=1e-15, maxiter=500)
    yy, st = inner(nu)
    mu = qp.gradient(yy) + nu * w
    mu[~st.active] = 0.0
    return yy, ActiveSetState(st.lower_active, st.upper_active, mu, nu, st.iter,
                              st.history, fallback=True)


def solve_projection(qp, y_init=None, c_pdas=1.0, warm=None, max_iter=200, block_tries=5,
                     mass_budget=40):
    """Primal-dual active-set iteration; returns (y, ActiveSetState).

    The plain PDAS update changes every index the predictor flags. If the
    number of KKT violators fails to decrease ``block_tries`` times in a
    row, single-index pivots take over until the count drops below its best
    value again. ``warm`` may be a previous ActiveSetState whose active sets
    seed the first iteration. If the problem carries a mass row and the loop
    does not settle within ``mass_budget`` iterations, the mass multiplier is
    located by root finding instead and the result is polished with a short
    active-set pass.
    """
    y = np.zeros(qp.n) if y_init is None else np.array(y_init, dtype=float)
    c = c_pdas * np.maximum(qp.op.diagonal(), 1e-300)
    tol = 1e-12 * (1.0 + float(np.max(np.abs(qp.b), initial=0.0)))
    la, ua = _initial_sets(qp, y, c, warm)
    budget = max_iter if qp.weights is None else min(max_iter, mass_budget)
    try:
        return _pdas(qp, c, la, ua, budget, block_tries, tol)
    except MaxPdasIterations:
        if qp.weights is None:
            raise
    yy, st = _solve_by_mass_multiplier(qp, y, c_pdas, max_iter, block_tries)
    try:
        y2, st2 = _pdas(qp, c, st.lower_active, st.upper_active, 5, block_tries, tol)
    except SubproblemFailure:
        st.iter += budget
        return yy, st
    st2.fallback = True
    st2.iter += st.iter + budget
    return y2, st2


def kkt_residual(qp, y, state):
    """Max-norm residual of stationarity, complementarity and feasibility."""
    grad = qp.gradient(y)
    if qp.weights is not None:
        grad = grad + state.nu * qp.weights
    r = grad - state.mu
    inactive = ~state.active
    comp = np.concatenate([
        np.maximum(-state.mu[state.lower_active], 0.0),
        np.maximum(state.mu[state.upper_active], 0.0),
        np.abs(state.mu[inactive]),
        np.abs(y[state.lower_active] - qp.lower[state.lower_active]),
        np.abs(y[state.upper_active] - qp.upper[state.upper_active]),
    ])
    return max(float(np.max(np.abs(r), initial=0.0)), float(np.max(comp, initial=0.0)),
               qp.violation(y))


def _pair_probes(qp, y, rng, n_random_pairs):
    """Feasible moves from y: coordinate moves (box only) or mass-preserving
    two-node exchanges e_i/w_i - e_j/w_j, cut at the box."""
    n = qp.n
    w = qp.weights
    probes = []
    if w is None:
        for i in range(n):
            for t in (qp.lower[i], qp.upper[i]):
                eta = y.copy()
                eta[i] = t if np.isfinite(t) else y[i] + np.sign(t)
                if eta[i] != y[i]:
                    probes.append(eta)
        return probes
    score = qp.gradient(y) / w
    partners = {int(np.argmax(score)), int(np.argmin(score))}
    pairs = [(i, j) for i in range(n) for j in partners if i != j]
    if n_random_pairs:
        extra = rng.integers(0, n, size=(n_random_pairs, 2))
        pairs += [(int(i), int(j)) for i, j in extra if i != j]
    for i, j in pairs:
        d = np.zeros(n)
        d[i] = 1.0 / w[i]
        d[j] = -1.0 / w[j]
        for step in (d, -d):
            with np.errstate(divide="ignore", invalid="ignore"):
                up = np.where(step > 0, (qp.upper - y) / step, np.inf)
                dn = np.where(step < 0, (qp.lower - y) / step, np.inf)
            tmax = min(float(np.min(up)), float(np.min(dn)), 1.0)
            if tmax > 0:
                probes.append(y + tmax * step)
    return probes


def random_feasible(qp, rng):
    """A random point of the box intersected with the mass hyperplane."""
    lo = np.where(np.isfinite(qp.lower), qp.lower, -1.0)
    hi = np.where(np.isfinite(qp.upper), qp.upper, 1.0)
    x = rng.uniform(lo, hi)
    if qp.weights is None:
        return x
    w = qp.weights

    def excess(t):
        return float(w @ np.clip(x + t, qp.lower, qp.upper)) - qp.rhs

    span = float(np.max(hi - lo)) + 1.0 + abs(qp.rhs) / float(np.min(np.abs(w)))
    t = brentq(excess, -span, span, xtol=1e-15)
    return np.clip(x + t, qp.lower, qp.upper)


def vi_residual(qp, y, phi_k=None, probe_count=20, seed=0):
    """Smallest value of (A y + b) . (eta - y) over feasible probes eta.

    With b = lambda j'(phi_k) - A phi_k this is the left-hand side of the
    variational inequality that characterizes the projection; it is >= 0 at
    the exact solution. ``phi_k`` itself is added as a probe when given.
    """
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(seed)
    g = qp.gradient(y)
    probes = _pair_probes(qp, y, rng, probe_count)
    probes += [random_feasible(qp, rng) for _ in range(probe_count)]
    if phi_k is not None:
        probes.append(np.asarray(phi_k, dtype=float))
    if not probes:
        return 0.0
    return min(float(g @ (eta - y)) for eta in probes)
