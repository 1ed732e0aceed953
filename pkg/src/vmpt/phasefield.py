"""Two-phase compliance + Ginzburg-Landau functional in shifted coordinates.

The computational variable is a scalar nodal field ``s``: the hard-phase
fraction minus its prescribed volume fraction ``m1``. The two-component view
is ``phi = (s, -s)`` with ``phi + m = (s + m1, 1 - m1 - s)``. Every bilinear
form below is evaluated on that two-component field, which is why the
gradient-energy and metric terms carry a factor 2 relative to the scalar
stiffness matrix.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .fem import (Elasticity, LoadCase, StiffnessModel, TriMesh, assemble_h1_form,
                  assemble_l2_form, lumped_weights)

N_PHASES = 2


class InfeasibleVolumeFraction(ValueError):
    pass


def psi0(phi):
    """Smooth potential 1/2 (1 - phi . phi) on the unshifted components (last axis)."""
    phi = np.asarray(phi, dtype=float)
    return 0.5 * (1.0 - np.sum(phi * phi, axis=-1))


def components(s, m1):
    """Unshifted two-component view (hard fraction, soft fraction) per node."""
    c = np.asarray(s) + m1
    return np.stack([c, 1.0 - c], axis=-1)


@dataclass
class FeasibleSet:
    """lower <= s <= upper node-wise and weights . s == 0.

    For two phases the lower bounds -m on both components become the box
    [-m1, m2] on the scalar field, and the pointwise sum constraint is
    eliminated by construction.
    """
    lower: np.ndarray
    upper: np.ndarray
    weights: np.ndarray
    shift: tuple = (0.5, 0.5)

    @classmethod
    def two_phase(cls, weights, m=(0.5, 0.5)):
        m = tuple(float(x) for x in m)
        if len(m) != N_PHASES or min(m) < 0 or abs(sum(m) - 1.0) > 1e-12:
            raise InfeasibleVolumeFraction(f"volume fractions {m} must be >= 0 and sum to 1")
        n = len(weights)
        return cls(lower=np.full(n, -m[0]), upper=np.full(n, m[1]),
                   weights=np.asarray(weights, dtype=float), shift=m)

    def mean(self, s):
        return float(self.weights @ s / self.weights.sum())

    def violation(self, s):
        """Largest violation of bounds or of the (normalized) mean constraint."""
        s = np.asarray(s)
        box = max(np.max(self.lower - s, initial=0.0), np.max(s - self.upper, initial=0.0))
        return max(box, abs(self.mean(s)))

    def contains(self, s, tol=1e-10):
        return self.violation(s) <= tol


def project_feasible(raw, fs, mean=0.0):
    """Clamp to the box, then shift uniformly (with re-clamping) to hit ``mean``.

    The clipped-shift map is monotone in the shift, so the correction is a
    scalar root find.
    """
    raw = np.asarray(raw, dtype=float)
    w = fs.weights / fs.weights.sum()
    lo, hi = float(w @ fs.lower), float(w @ fs.upper)
    if not lo - 1e-14 <= mean <= hi + 1e-14:
        raise InfeasibleVolumeFraction(f"mean {mean} outside attainable range [{lo}, {hi}]")
    x = np.clip(raw, fs.lower, fs.upper)

    def excess(t):
        return float(w @ np.clip(x + t, fs.lower, fs.upper)) - mean

    if abs(excess(0.0)) <= 1e-15:
        return x
    span = float(np.max(fs.upper - fs.lower)) + 1.0
    t = brentq(excess, -span, span, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    out = np.clip(x + t, fs.lower, fs.upper)
    # remove the last rounding-level residual on the free nodes
    free = (out > fs.lower) & (out < fs.upper)
    if np.any(free):
        out[free] -= (w @ out - mean) / w[free].sum()
    return out


@dataclass
class ProblemParams:
    epsilon: float = 0.04
    gamma: float = 0.5
    m: tuple = (0.5, 0.5)
    stiffness: StiffnessModel = field(default_factory=StiffnessModel)
    load: LoadCase = field(default_factory=LoadCase)

    def __post_init__(self):
        for name in ("epsilon", "gamma"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be positive and finite, got {val}")


class PhaseFieldProblem:
    """Reduced functional j(s) = compliance(S(s + m)) + gamma E(s + m).

    Evaluations are cached on the last argument so the line search, gradient
    and second-order metric share one state solve and factorization.
    """

    def __init__(self, mesh, params=None, reuse_factorization=False, refactor_after=4):
        self.mesh = mesh
        self.reuse_factorization = reuse_factorization
        self.refactor_after = refactor_after
        self._factor = None
        self.n_factorizations = 0
        self.params = params or ProblemParams()
        self.elasticity = Elasticity(mesh, self.params.stiffness, self.params.load)
        self.stiff = assemble_h1_form(mesh)
        self.mass = assemble_l2_form(mesh)
        self.weights = lumped_weights(mesh)
        self.feasible_set = FeasibleSet.two_phase(self.weights, self.params.m)
        self.m1 = self.params.m[0]
        self._cache = None
        self.n_state_solves = 0

    @classmethod
    def cantilever(cls, h, **kw):
        return cls(TriMesh.from_h(h, 2.0, 1.0), ProblemParams(**kw))

    @property
    def n(self):
        return self.mesh.n_nodes

    # -- energy ---------------------------------------------------------
    def gradient_energy(self, s):
        """(eps/2) int |grad phi|^2 over both components."""
        return self.params.epsilon * float(s @ (self.stiff @ s))

    def potential_energy(self, s):
        """(1/eps) int psi0(phi + m); psi0 = c (1 - c) for two phases, integrated exactly."""
        c = np.asarray(s) + self.m1
        return (float(self.weights @ c) - float(c @ (self.mass @ c))) / self.params.epsilon

    def gl_energy(self, s):
        return self.gradient_energy(s) + self.potential_energy(s)

    def gl_gradient(self, s):
        eps = self.params.epsilon
        c = np.asarray(s) + self.m1
        return 2.0 * eps * (self.stiff @ s) + (self.weights - 2.0 * (self.mass @ c)) / eps

    # -- state / functional --------------------------------------------
    def state(self, s, exact=False):
        """Elastic state at s. With ``reuse_factorization`` the last exact
        factorization preconditions CG for nearby fields; it is renewed once
        CG needs more than ``refactor_after`` steps. ``exact=True`` forces a
        state carrying its own factorization."""
        s = np.asarray(s, dtype=float)
        if self._cache is not None and np.array_equal(self._cache[0], s):
            if self._cache[1].exact or not exact:
                return self._cache[1]
        precond = self._factor if (self.reuse_factorization and not exact) else None
        st = self.elasticity.solve(s + self.m1, precond=precond)
        self.n_state_solves += 1
        if st.exact:
            self.n_factorizations += 1
            self._factor = st.factor
        elif st.cg_iters > self.refactor_after:
            self._factor = None
        self._cache = (s.copy(), st)
        return st

    def value(self, s):
        st = self.state(s)
        return st.compliance + self.params.gamma * self.gl_energy(s)

    def evaluate(self, s):
        """(j, state) at s."""
        st = self.state(s)
        return st.compliance + self.params.gamma * self.gl_energy(s), st

    def compliance_gradient(self, s, st=None):
        """-int C'(c) v E(u):E(u) as a nodal dual vector."""
        st = st or self.state(s)
        G = self.elasticity.coupling(st)
        return -(G.T @ st.u)

    def gradient(self, s):
        s = np.asarray(s, dtype=float)
        st = self.state(s)
        return self.compliance_gradient(s, st) + self.params.gamma * self.gl_gradient(s)

    # -- norms ----------------------------------------------------------
    def h_norm(self, v):
        """Norm of (v, -v) in the mean-free H^1 space: ||grad (v, -v)||_{L^2}."""
        return float(np.sqrt(max(2.0 * float(v @ (self.stiff @ v)), 0.0)))

    def scaled_h_norm(self, v):
        """sqrt(gamma eps) ||grad v||_{L^2}, the stopping quantity used for the mesh studies."""
        p = self.params
        return float(np.sqrt(p.gamma * p.epsilon)) * self.h_norm(v)

    def l2_norm(self, v):
        return float(np.sqrt(max(2.0 * float(v @ (self.mass @ v)), 0.0)))

    # -- initial guesses -----------------------------------------------
    def initial_guess(self, kind="uniform", seed=0):
        if kind == "uniform":
            return np.zeros(self.n)
        if kind == "random":
            rng = np.random.default_rng(seed)
            fs = self.feasible_set
            raw = rng.uniform(fs.lower, fs.upper)
            return project_feasible(raw, fs)
        raise ValueError(f"unknown initial guess {kind!r}")
