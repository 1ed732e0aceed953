"""Independent reference computations used only by the tests."""
import itertools

import numpy as np


def qp_enumeration(A, b, lower, upper, weights=None, rhs=0.0, tol=1e-9, max_patterns=2_000_000):
    """Exact solution of min 1/2 y^T A y + b^T y on a box (+ one equality row).

    Enumerates active patterns (each node free, at its lower or at its upper
    bound) by increasing number of active nodes, solving the equality-
    constrained system for each and returning the first pattern that satisfies
    all KKT conditions. The KKT point of a strictly convex QP is unique, so
    the first hit is the minimizer. Patterns of one cardinality are solved as
    a batch.
    """
    A = np.asarray(A, dtype=float)
    n = len(b)
    lower = np.broadcast_to(lower, (n,)).astype(float)
    upper = np.broadcast_to(upper, (n,)).astype(float)
    n_eq = 0 if weights is None else 1
    seen = 0
    for k in range(n + 1):
        for act in itertools.combinations(range(n), k):
            act = list(act)
            free = [i for i in range(n) if i not in act]
            choices = [[v for v in ((0, lower[i]), (1, upper[i])) if np.isfinite(v[1])] for i in act]
            combos = list(itertools.product(*choices)) if act else [()]
            seen += len(combos)
            if seen > max_patterns:
                raise RuntimeError("enumeration budget exceeded")
            if not combos:
                continue
            nF = len(free)
            vals = np.array([[c[1] for c in combo] for combo in combos]).reshape(len(combos), k)
            sides = np.array([[c[0] for c in combo] for combo in combos]).reshape(len(combos), k)
            Y = np.zeros((len(combos), n))
            Y[:, act] = vals
            if nF + n_eq > 0:
                K = np.zeros((nF + n_eq, nF + n_eq))
                K[:nF, :nF] = A[np.ix_(free, free)]
                if n_eq:
                    K[:nF, nF] = weights[free]
                    K[nF, :nF] = weights[free]
                R = np.zeros((len(combos), nF + n_eq))
                R[:, :nF] = -b[free] - vals @ A[np.ix_(free, act)].T if k else -b[free]
                if n_eq:
                    R[:, nF] = rhs - (vals @ weights[act] if k else 0.0)
                try:
                    X = np.linalg.solve(K, R.T).T
                except np.linalg.LinAlgError:
                    continue
                Y[:, free] = X[:, :nF]
                nu = X[:, nF] if n_eq else np.zeros(len(combos))
            else:
                nu = np.zeros(len(combos))
            if n_eq:
                ok = np.abs(Y @ weights - rhs) <= tol * (1 + abs(rhs)) * np.sum(np.abs(weights))
            else:
                ok = np.ones(len(combos), dtype=bool)
            ok &= np.all(Y >= lower - tol, axis=1) & np.all(Y <= upper + tol, axis=1)
            mu = Y @ A + b
            if n_eq:
                mu = mu + nu[:, None] * weights
            if k:
                mu_act = mu[:, act]
                ok &= np.all(np.where(sides == 0, mu_act >= -tol, mu_act <= tol), axis=1)
            if np.any(ok):
                return Y[np.argmax(ok)]
    raise RuntimeError("no KKT pattern found")


def qp_objective(A, b, y):
    return 0.5 * y @ A @ y + b @ y


def triangle_quadrature_gl(mesh, c, epsilon):
    """GL energy of a P1 hard-phase fraction, triangle by triangle.

    Gradient part from the constant P1 gradient, potential c (1 - c) with the
    edge-midpoint rule (exact for quadratics). Summation order is shuffled.
    """
    order = np.random.default_rng(123).permutation(mesh.n_triangles)
    total = 0.0
    for t in order:
        tri = mesh.triangles[t]
        P = mesh.points[tri]
        e1, e2 = P[1] - P[0], P[2] - P[0]
        area = 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
        M = np.array([[1, *P[0]], [1, *P[1]], [1, *P[2]]])
        coef = np.linalg.solve(M, c[tri])
        grad = coef[1:]
        # (eps/2) |grad phi|^2 over both components = eps |grad c|^2
        total += epsilon * area * grad @ grad
        mids = [(c[tri[i]] + c[tri[(i + 1) % 3]]) / 2 for i in range(3)]
        total += area / 3.0 * sum(mv * (1 - mv) for mv in mids) / epsilon
    return total


def dense_elasticity(mesh, E_nodes_fn, nu, load_vec, fixed_dofs):
    """Plane-strain stiffness assembled element by element into a dense matrix, then solved."""
    n = 2 * mesh.n_nodes
    K = np.zeros((n, n))
    for t, tri in enumerate(mesh.triangles):
        P = mesh.points[tri]
        e1, e2 = P[1] - P[0], P[2] - P[0]
        area = 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
        M = np.array([[1, *P[0]], [1, *P[1]], [1, *P[2]]])
        grads = np.linalg.inv(M)[1:].T  # row i = grad of hat function i
        B = np.zeros((3, 6))
        for i in range(3):
            B[0, 2 * i] = grads[i, 0]
            B[1, 2 * i + 1] = grads[i, 1]
            B[2, 2 * i] = grads[i, 1]
            B[2, 2 * i + 1] = grads[i, 0]
        E = E_nodes_fn(tri)
        lam = E / ((1 + nu) * (1 - 2 * nu))
        D = lam * np.array([[1 - nu, nu, 0], [nu, 1 - nu, 0], [0, 0, 0.5 - nu]])
        dofs = np.ravel([[2 * v, 2 * v + 1] for v in tri])
        K[np.ix_(dofs, dofs)] += area * B.T @ D @ B
    free = np.setdiff1d(np.arange(n), fixed_dofs)
    u = np.zeros(n)
    u[free] = np.linalg.solve(K[np.ix_(free, free)], load_vec[free])
    return K, u
