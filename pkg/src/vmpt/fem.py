"""P1 finite elements on structured triangle meshes.

Scalar forms (stiffness / mass) for the phase field and plane-strain linear
elasticity for the displacement. The elasticity tensor is an interpolation
between a hard and a soft isotropic material, driven by the nodal hard-phase
fraction evaluated at triangle centroids.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class DegenerateMesh(ValueError):
    pass


class SingularSystem(RuntimeError):
    pass


class TriMesh:
    """Rectangle [0, lx] x [0, ly] with nx x ny cells, each cut into two triangles.

    Node (i, j) has index ``i + j * (nx + 1)``.
    """

    def __init__(self, nx, ny, lx=1.0, ly=1.0):
        if nx < 1 or ny < 1 or lx <= 0 or ly <= 0:
            raise DegenerateMesh(f"bad mesh size nx={nx} ny={ny} lx={lx} ly={ly}")
        self.nx, self.ny = int(nx), int(ny)
        self.lx, self.ly = float(lx), float(ly)

        xs = np.linspace(0.0, lx, nx + 1)
        ys = np.linspace(0.0, ly, ny + 1)
        X, Y = np.meshgrid(xs, ys)
        self.points = np.column_stack([X.ravel(), Y.ravel()])

        i, j = np.meshgrid(np.arange(nx), np.arange(ny))
        n00 = (i + j * (nx + 1)).ravel()
        n10 = n00 + 1
        n01 = n00 + nx + 1
        n11 = n01 + 1
        lower = np.column_stack([n00, n10, n11])
        upper = np.column_stack([n00, n11, n01])
        self.triangles = np.vstack([lower, upper])

        p = self.points[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0):
            raise DegenerateMesh("non-positive triangle area")
        self.area = 0.5 * det
        # gradients of the barycentric coordinates, shape (nt, 3, 2)
        inv = np.empty((len(det), 2, 2))
        inv[:, 0, 0] = e2[:, 1] / det
        inv[:, 0, 1] = -e2[:, 0] / det
        inv[:, 1, 0] = -e1[:, 1] / det
        inv[:, 1, 1] = e1[:, 0] / det
        g12 = inv  # rows: grad lambda_1, grad lambda_2
        self.grads = np.empty((len(det), 3, 2))
        self.grads[:, 1:] = g12
        self.grads[:, 0] = -g12[:, 0] - g12[:, 1]

    @classmethod
    def from_h(cls, h, lx=2.0, ly=1.0):
        nx = int(round(lx / h))
        ny = int(round(ly / h))
        return cls(nx, ny, lx, ly)

    @property
    def n_nodes(self):
        return len(self.points)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def h(self):
        return max(self.lx / self.nx, self.ly / self.ny)

    def boundary_nodes(self, side):
        """Node indices on ``left``, ``right``, ``bottom`` or ``top``, ordered along the edge."""
        nx, ny = self.nx, self.ny
        if side == "left":
            return np.arange(ny + 1) * (nx + 1)
        if side == "right":
            return np.arange(ny + 1) * (nx + 1) + nx
        if side == "bottom":
            return np.arange(nx + 1)
        if side == "top":
            return ny * (nx + 1) + np.arange(nx + 1)
        raise ValueError(f"unknown side {side!r}")


def _scatter(mesh, local):
    nt = mesh.n_triangles
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    A = sp.coo_matrix((local.reshape(nt, 9).ravel(), (rows, cols)),
                      shape=(mesh.n_nodes, mesh.n_nodes))
    return A.tocsr()


def assemble_h1_form(mesh):
    """P1 stiffness matrix of (grad p, grad y)."""
    local = mesh.area[:, None, None] * np.einsum("tik,tjk->tij", mesh.grads, mesh.grads)
    return _scatter(mesh, local)


def assemble_l2_form(mesh):
    """Consistent P1 mass matrix."""
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = mesh.area[:, None, None] * ref[None]
    return _scatter(mesh, local)


def lumped_weights(mesh):
    """Row sums of the mass matrix, i.e. the integrals of the hat functions."""
    w = np.zeros(mesh.n_nodes)
    np.add.at(w, mesh.triangles.ravel(), np.repeat(mesh.area / 3.0, 3))
    return w


def plane_strain_matrix(E, nu):
    """Voigt matrix (engineering shear strain) of an isotropic plane-strain material."""
    c = E / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return c * np.array([[1.0 - nu, nu, 0.0],
                         [nu, 1.0 - nu, 0.0],
                         [0.0, 0.0, 0.5 - nu]])


@dataclass
class StiffnessModel:
    """C(c) = C_soft + q(c) (C_hard - C_soft) with q(c) = c**2 on [0, 1].

    ``c`` is the hard-phase fraction. q is clamped outside [0, 1].
    """
    e_hard: float = 1.0
    e_soft: float = 1e-4
    nu_hard: float = 0.3
    nu_soft: float = 0.3

    def __post_init__(self):
        if not (self.e_hard > 0 and self.e_soft > 0):
            raise ValueError("Young's moduli must be positive")
        for nu in (self.nu_hard, self.nu_soft):
            if not -1.0 < nu < 0.5:
                raise ValueError(f"Poisson ratio {nu} outside (-1, 0.5)")

    @property
    def d_soft(self):
        return plane_strain_matrix(self.e_soft, self.nu_soft)

    @property
    def d_hard(self):
        return plane_strain_matrix(self.e_hard, self.nu_hard)

    @staticmethod
    def q(c):
        c = np.clip(c, 0.0, 1.0)
        return c * c

    @staticmethod
    def dq(c):
        c = np.asarray(c, dtype=float)
        return np.where((c >= 0.0) & (c <= 1.0), 2.0 * c, 0.0)

    def tensor(self, c):
        return self.d_soft + self.q(c) * (self.d_hard - self.d_soft)


def strain_matrices(mesh):
    """B matrices (nt, 3, 6) mapping (ux1, uy1, ux2, uy2, ux3, uy3) to Voigt strain."""
    g = mesh.grads
    B = np.zeros((mesh.n_triangles, 3, 6))
    B[:, 0, 0::2] = g[:, :, 0]
    B[:, 1, 1::2] = g[:, :, 1]
    B[:, 2, 0::2] = g[:, :, 1]
    B[:, 2, 1::2] = g[:, :, 0]
    return B


@dataclass
class LoadCase:
    """Dirichlet side plus a uniform traction on a segment of another side."""
    dirichlet: str = "left"
    traction_side: str = "right"
    center: float = 0.5
    length: float = 0.25
    traction: tuple = (0.0, -1.0)


def traction_vector(mesh, load):
    """Nodal load f with f . xi = int_{Gamma_g} g . xi for P1 xi (exact)."""
    f = np.zeros(2 * mesh.n_nodes)
    if load.length <= 0 or not np.any(load.traction):
        return f
    nodes = mesh.boundary_nodes(load.traction_side)
    axis = 1 if load.traction_side in ("left", "right") else 0
    coord = mesh.points[nodes, axis]
    a, b = load.center - 0.5 * load.length, load.center + 0.5 * load.length
    gp = np.array([-1.0, 1.0]) / np.sqrt(3.0)
    for k in range(len(nodes) - 1):
        x0, x1 = coord[k], coord[k + 1]
        lo, hi = max(a, x0), min(b, x1)
        if hi <= lo:
            continue
        s = 0.5 * (lo + hi) + 0.5 * (hi - lo) * gp
        phi1 = (s - x0) / (x1 - x0)
        wts = 0.5 * (hi - lo)
        c0 = wts * np.sum(1.0 - phi1)
        c1 = wts * np.sum(phi1)
        for d in range(2):
            f[2 * nodes[k] + d] += c0 * load.traction[d]
            f[2 * nodes[k + 1] + d] += c1 * load.traction[d]
    return f


def solve_state(K, f, free=None):
    """Solve K u = f on the free dofs, u = 0 elsewhere.

    K may be the full operator (with ``free`` the unconstrained dof indices)
    or an already reduced one.
    """
    if free is None:
        free = np.arange(K.shape[0])
    Kff = K[free][:, free]
    fac = factorize(Kff)
    u = np.zeros(len(f))
    u[free] = fac.solve(f[free])
    return u


class _Factor:
    """Reusable sparse LU of an SPD matrix; ``solve`` accepts vectors or blocks."""

    def __init__(self, A):
        try:
            A = A if sp.isspmatrix_csc(A) else sp.csc_matrix(A)
            self._lu = splu(A, permc_spec="MMD_AT_PLUS_A",
                            diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from exc
        piv = np.abs(self._lu.U.diagonal())
        if len(piv) and piv.min() <= 1e3 * np.finfo(float).eps * piv.max():
            raise SingularSystem("numerically singular (is the Dirichlet boundary missing?)")
        self.n_solves = 0

    def solve(self, rhs):
        self.n_solves += 1
        out = self._lu.solve(rhs)
        if not np.all(np.isfinite(out)):
            raise SingularSystem("non-finite solution")
        return out


def factorize(A):
    return _Factor(A)


class StaleFactor(RuntimeError):
    pass


class _Preconditioned:
    """Solves A x = b by CG preconditioned with the factorization of a nearby matrix.

    Used for states whose stiffness differs little from the last factorized
    one. Raises StaleFactor when CG needs more than ``maxiter`` steps.
    """

    def __init__(self, A, factor, rtol=1e-13, maxiter=8):
        self.A = A
        self.base = factor
        self.rtol = rtol
        self.maxiter = maxiter
        self.last_iters = 0
        self.n_solves = 0

    def _solve1(self, b):
        x = self.base.solve(b)
        r = b - self.A @ x
        bnorm = np.linalg.norm(b)
        if bnorm == 0:
            return np.zeros_like(b)
        z = self.base.solve(r)
        d = z.copy()
        rz = float(r @ z)
        for it in range(self.maxiter + 1):
            if np.linalg.norm(r) <= self.rtol * bnorm:
                self.last_iters = it
                return x
            if it == self.maxiter:
                break
            Ad = self.A @ d
            alpha = rz / float(d @ Ad)
            x += alpha * d
            r -= alpha * Ad
            z = self.base.solve(r)
            rz_new = float(r @ z)
            d = z + (rz_new / rz) * d
            rz = rz_new
        raise StaleFactor(f"preconditioned CG not converged in {self.maxiter} steps")

    def solve(self, rhs):
        self.n_solves += 1
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            return self._solve1(rhs)
        return np.column_stack([self._solve1(rhs[:, i]) for i in range(rhs.shape[1])])


@dataclass
class ElasticState:
    """Displacement at a given phase field with a solver for its stiffness.

    ``factor`` is an exact factorization of K_ff when ``exact`` is true,
    otherwise a CG solver preconditioned by an earlier factorization.
    """
    c: np.ndarray
    u: np.ndarray
    compliance: float
    factor: object = field(repr=False)
    K: sp.csr_matrix = field(repr=False)
    exact: bool = True
    cg_iters: int = 0


class Elasticity:
    """Assembly and solution of the elasticity system for a nodal hard-phase fraction."""

    def __init__(self, mesh, stiffness=None, load=None):
        self.mesh = mesh
        self.stiffness = stiffness or StiffnessModel()
        self.load = load or LoadCase()
        if self.load.dirichlet == self.load.traction_side:
            raise ValueError("Dirichlet and traction boundaries must be disjoint")

        B = strain_matrices(mesh)
        self.B = B
        a = mesh.area[:, None, None]
        Bt = B.transpose(0, 2, 1)
        self.k_soft = a * Bt @ self.stiffness.d_soft @ B
        self.k_diff = a * Bt @ (self.stiffness.d_hard - self.stiffness.d_soft) @ B

        tri = mesh.triangles
        self.edofs = np.empty((mesh.n_triangles, 6), dtype=np.int64)
        self.edofs[:, 0::2] = 2 * tri
        self.edofs[:, 1::2] = 2 * tri + 1
        self._rows = np.repeat(self.edofs, 6, axis=1).ravel()
        self._cols = np.tile(self.edofs, (1, 6)).ravel()

        self.n_dofs = 2 * mesh.n_nodes
        fixed_nodes = mesh.boundary_nodes(self.load.dirichlet)
        if len(fixed_nodes) < 2:
            raise SingularSystem("Dirichlet boundary has zero measure")
        self.fixed = np.sort(np.concatenate([2 * fixed_nodes, 2 * fixed_nodes + 1]))
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.fixed] = False
        self.free = np.flatnonzero(mask)
        self.f = traction_vector(mesh, self.load)

        # sparsity pattern of K and of its free-free block, computed once
        n = self.n_dofs
        uniq, self._slot = np.unique(self._rows * n + self._cols, return_inverse=True)
        ur, uc = np.divmod(uniq, n)
        self._nnz = len(uniq)
        self._indptr = np.searchsorted(ur, np.arange(n + 1))
        self._indices = uc
        fmap = np.full(n, -1)
        fmap[self.free] = np.arange(len(self.free))
        keep = (fmap[ur] >= 0) & (fmap[uc] >= 0)
        self._ff_keep = np.flatnonzero(keep)
        self._ff_indptr = np.searchsorted(fmap[ur[keep]], np.arange(len(self.free) + 1))
        self._ff_indices = fmap[uc[keep]]

    def centroid_values(self, c):
        return np.asarray(c)[self.mesh.triangles].mean(axis=1)

    def element_matrices(self, c):
        q = self.stiffness.q(self.centroid_values(c))
        return self.k_soft + q[:, None, None] * self.k_diff

    def _data(self, c):
        return np.bincount(self._slot.ravel(), weights=self.element_matrices(c).ravel(),
                           minlength=self._nnz)

    def assemble(self, c, data=None):
        """Full (unconstrained) stiffness operator K(c)."""
        data = self._data(c) if data is None else data
        return sp.csr_matrix((data, self._indices, self._indptr),
                             shape=(self.n_dofs, self.n_dofs))

    def solve(self, c, precond=None):
        """State at hard-phase fraction ``c``.

        Without ``precond`` K_ff is factorized. With an earlier exact factor
        the system is solved by preconditioned CG, falling back to a fresh
        factorization if CG stalls.
        """
        data = self._data(c)
        K = self.assemble(c, data)
        nf = len(self.free)
        # K_ff is symmetric, so its CSR arrays are also valid CSC arrays
        Kff = sp.csc_matrix((data[self._ff_keep], self._ff_indices, self._ff_indptr),
                            shape=(nf, nf))
        u = np.zeros(self.n_dofs)
        if precond is not None:
            solver = _Preconditioned(Kff, precond)
            try:
                u[self.free] = solver.solve(self.f[self.free])
                return ElasticState(c=np.array(c, dtype=float), u=u,
                                    compliance=float(self.f @ u), factor=solver, K=K,
                                    exact=False, cg_iters=solver.last_iters)
            except StaleFactor:
                pass
        fac = factorize(Kff)
        u[self.free] = fac.solve(self.f[self.free])
        return ElasticState(c=np.array(c, dtype=float), u=u,
                            compliance=float(self.f @ u), factor=fac, K=K)

    def element_energy_diff(self, u):
        """u_T^T k_diff_T u_T per triangle."""
        ue = u[self.edofs]
        return np.einsum("ti,tij,tj->t", ue, self.k_diff, ue)

    def coupling(self, state):
        """Sparse G (n_dofs x n_nodes): (G p) . eta = int C'(c) p E(u):E(eta).

        p is evaluated at the centroid (mean of the three nodal values).
        """
        mesh = self.mesh
        d = self.stiffness.dq(self.centroid_values(state.c))
        r = np.einsum("tij,tj->ti", self.k_diff, state.u[self.edofs]) * d[:, None]
        vals = np.repeat(r[:, :, None] / 3.0, 3, axis=2)  # (nt, 6, 3)
        rows = np.repeat(self.edofs[:, :, None], 3, axis=2)
        cols = np.repeat(mesh.triangles[:, None, :], 6, axis=1)
        G = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                          shape=(self.n_dofs, mesh.n_nodes))
        return G.tocsr()

    def solve_linearized_state(self, state, p, G=None):
        """z_p = S'(c) p, reusing the factorization stored in ``state``.

        ``p`` may be a single nodal vector or an (n_nodes, k) block.
        """
        if G is None:
            G = self.coupling(state)
        rhs = -(G @ p)
        z = np.zeros_like(rhs, dtype=float)
        z[self.free] = state.factor.solve(rhs[self.free])
        return z


def strains(elasticity, u):
    """Voigt strain per triangle."""
    return np.einsum("tij,tj->ti", elasticity.B, u[elasticity.edofs])
