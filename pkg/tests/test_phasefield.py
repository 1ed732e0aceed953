import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmpt.fem import LoadCase, TriMesh
from vmpt.phasefield import (FeasibleSet, InfeasibleVolumeFraction, PhaseFieldProblem,
                             ProblemParams, components, project_feasible, psi0)

from oracles import dense_elasticity, triangle_quadrature_gl


@pytest.fixture(scope="module")
def coarse():
    return PhaseFieldProblem.cantilever(2.0 ** -3)


def random_feasible(problem, rng):
    return project_feasible(rng.uniform(-0.5, 0.5, problem.n), problem.feasible_set)


def test_psi0_vanishes_at_pure_phases():
    assert psi0([1.0, 0.0]) == 0.0 and psi0([0.0, 1.0]) == 0.0
    assert psi0([0.5, 0.5]) == 0.25


def test_components_sum_to_one():
    c = components(np.array([-0.5, 0.1, 0.5]), 0.5)
    np.testing.assert_allclose(c.sum(axis=1), 1.0)


def test_params_validation():
    with pytest.raises(ValueError):
        ProblemParams(epsilon=0.0)
    with pytest.raises(ValueError):
        ProblemParams(gamma=float("inf"))


def test_pure_phase_has_zero_energy(coarse):
    s = np.full(coarse.n, 0.5)  # c = 1 everywhere
    assert abs(coarse.gl_energy(s)) < 1e-12
    assert abs(coarse.gl_energy(np.full(coarse.n, -0.5))) < 1e-12


def test_uniform_mixture_energy(coarse):
    eps = coarse.params.epsilon
    assert np.isclose(coarse.gl_energy(np.zeros(coarse.n)), 2.0 / (4 * eps), rtol=1e-13)


def test_gl_energy_matches_triangle_quadrature(coarse):
    rng = np.random.default_rng(0)
    for _ in range(3):
        s = rng.uniform(-0.5, 0.5, coarse.n)
        ref = triangle_quadrature_gl(coarse.mesh, s + 0.5, coarse.params.epsilon)
        assert abs(coarse.gl_energy(s) - ref) <= 1e-12 * abs(ref)


def test_gradient_part_nonnegative(coarse):
    s = np.random.default_rng(1).standard_normal(coarse.n)
    assert coarse.gradient_energy(s) >= 0


def test_j_zero_load_is_gl_energy():
    pr = PhaseFieldProblem(TriMesh.from_h(0.25),
                           ProblemParams(load=LoadCase(traction=(0.0, 0.0))))
    s = random_feasible(pr, np.random.default_rng(2))
    assert pr.value(s) == pytest.approx(pr.params.gamma * pr.gl_energy(s), rel=1e-15)
    # gamma = 0 and no load: zero gradient
    pr0 = PhaseFieldProblem(TriMesh.from_h(0.25),
                            ProblemParams(gamma=1e-300, load=LoadCase(traction=(0.0, 0.0))))
    assert np.max(np.abs(pr0.gradient(s))) < 1e-290


def test_j_matches_component_oracles():
    pr = PhaseFieldProblem(TriMesh(4, 2, 2.0, 1.0))
    s = random_feasible(pr, np.random.default_rng(3))
    c = s + pr.m1
    st_model = pr.params.stiffness

    def young(tri):
        q = st_model.q(c[tri].mean())
        return st_model.e_soft + q * (st_model.e_hard - st_model.e_soft)

    el = pr.elasticity
    _, u = dense_elasticity(pr.mesh, young, 0.3, el.f, el.fixed)
    ref = el.f @ u + pr.params.gamma * triangle_quadrature_gl(pr.mesh, c, pr.params.epsilon)
    j, _ = pr.evaluate(s)
    assert abs(j - ref) <= 1e-10 * abs(ref)


def test_potential_gradient_closed_form(coarse):
    """Constant mixture c = m1 + s0: d/ds of (1/eps) int c(1 - c) is (1 - 2c) w / eps."""
    s0 = 0.2
    s = np.full(coarse.n, s0)
    g = coarse.gl_gradient(s)
    eps = coarse.params.epsilon
    # in the two-component view psi0'(phi) = -phi, so the potential part is -(1/eps) M (2c - 1)
    ref = -(coarse.mass @ np.full(coarse.n, 2 * (0.5 + s0) - 1.0)) / eps
    np.testing.assert_allclose(g, ref, atol=1e-12 * np.max(np.abs(ref)))


def test_gradient_central_differences(coarse):
    rng = np.random.default_rng(4)
    for _ in range(4):
        s = random_feasible(coarse, rng)
        v = rng.standard_normal(coarse.n)
        slope = coarse.gradient(s) @ v
        errs = []
        for t in (1e-3, 1e-4, 1e-5):
            fd = (coarse.value(s + t * v) - coarse.value(s - t * v)) / (2 * t)
            errs.append(abs(fd - slope))
        assert errs[2] <= 1e-6 * abs(slope)
        assert errs[0] / errs[1] > 30  # O(t^2) until round-off takes over


def test_lipschitz_witness(coarse):
    """||j'(a) - j'(b)||_dual / ||a - b||_(H1 and Linf) stays bounded over samples."""
    rng = np.random.default_rng(5)
    Minv = np.linalg.inv((coarse.stiff + coarse.mass).toarray())
    ratios = []
    for _ in range(8):
        a, b = random_feasible(coarse, rng), random_feasible(coarse, rng)
        dg = coarse.gradient(a) - coarse.gradient(b)
        dual = np.sqrt(dg @ Minv @ dg)
        d = a - b
        dist = np.sqrt(d @ ((coarse.stiff + coarse.mass) @ d)) + np.max(np.abs(d))
        ratios.append(dual / dist)
    assert max(ratios) / min(ratios) < 10


def test_feasible_set_invariants(coarse):
    fs = coarse.feasible_set
    assert fs.contains(np.zeros(coarse.n))
    assert np.all(fs.lower >= -1) and np.all(fs.upper <= 1)
    with pytest.raises(InfeasibleVolumeFraction):
        FeasibleSet.two_phase(coarse.weights, (0.7, 0.4))


def test_project_feasible_keeps_zero(coarse):
    np.testing.assert_array_equal(project_feasible(np.zeros(coarse.n), coarse.feasible_set), 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), shift=st.floats(-0.4, 0.4), m1=st.floats(0.05, 0.95))
def test_project_feasible_property(seed, shift, m1):
    mesh = TriMesh(6, 3, 2.0, 1.0)
    w = PhaseFieldProblem(mesh).weights
    fs = FeasibleSet.two_phase(w, (m1, 1 - m1))
    raw = np.random.default_rng(seed).uniform(-1, 1, mesh.n_nodes) + shift
    out = project_feasible(raw, fs)
    assert abs(fs.mean(out)) <= 1e-12
    assert np.all(out >= fs.lower) and np.all(out <= fs.upper)


def test_project_feasible_rejects_unreachable_mean():
    w = np.ones(5)
    fs = FeasibleSet.two_phase(w, (1.0, 0.0))  # box [-1, 0]
    with pytest.raises(InfeasibleVolumeFraction):
        project_feasible(np.zeros(5), fs, mean=-1.5)


def test_state_cache_and_exact(coarse):
    s = random_feasible(coarse, np.random.default_rng(6))
    st1 = coarse.state(s)
    assert coarse.state(s.copy()) is st1
    st2 = coarse.state(s, exact=True)
    assert st2.exact
    np.testing.assert_allclose(st2.u, st1.u, rtol=1e-10, atol=1e-14)


def test_initial_guesses(coarse):
    assert np.all(coarse.initial_guess("uniform") == 0)
    r1, r2 = coarse.initial_guess("random", 7), coarse.initial_guess("random", 7)
    np.testing.assert_array_equal(r1, r2)
    assert coarse.feasible_set.contains(r1)
    with pytest.raises(ValueError):
        coarse.initial_guess("checkerboard")
