"""Acceptance criteria 1-9. Each test records one PASS/FAIL line.

The mesh studies (criteria 4, 5, 6, 7) take tens of minutes and carry the
``slow`` marker; deselect them with ``-m "not slow"``.
"""
import time

import numpy as np
import pytest
import scipy.sparse as sp

from vmpt.core import InvariantViolation, SolverConfig, verify_trace, vmpt_solve
from vmpt.experiments import RunSpec, lambda_tail_median, run_single
from vmpt.fem import LoadCase, TriMesh, assemble_h1_form, lumped_weights
from vmpt.metrics import MetricFactory, make_second_order_metric
from vmpt.pdas import QPProblem, solve_projection
from vmpt.phasefield import PhaseFieldProblem, ProblemParams, project_feasible

from acceptance_log import record
from oracles import qp_enumeration

MESH_STUDY = dict(epsilon=0.04, gamma=0.5, tol=1e-5, init="uniform")


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


def test_criterion_1_gradient_finite_differences():
    t0 = time.perf_counter()
    problem = PhaseFieldProblem.cantilever(2.0 ** -3)
    rng = np.random.default_rng(0)
    worst, rates, monotone = 0.0, [], True
    for _ in range(10):
        s = project_feasible(rng.uniform(-0.5, 0.5, problem.n), problem.feasible_set)
        v = rng.standard_normal(problem.n)
        slope = float(problem.gradient(s) @ v)
        errs = []
        for t in (1e-3, 1e-4, 1e-5):
            fd = (problem.value(s + t * v) - problem.value(s - t * v)) / (2 * t)
            errs.append(abs(fd - slope) / abs(slope))
        worst = max(worst, errs[2])
        rates.append(errs[0] / errs[1])
        monotone &= errs[0] > errs[1] > errs[2]
    elapsed = time.perf_counter() - t0
    # t^2 predicts a factor 100 per decade; the last decade reaches the
    # round-off floor of j (about 1e-13 absolute, divided by t)
    second_order = 50 <= min(rates) and max(rates) <= 200
    ok = worst <= 1e-5 and second_order and monotone and elapsed < 10
    record(1, ok, f"max rel err {worst:.2e} at t=1e-5, decade ratios "
                  f"{min(rates):.0f}-{max(rates):.0f}, monotone {monotone}, {elapsed:.1f}s")
    assert ok


def random_instance(k):
    sizes = [(2, 1), (3, 1), (2, 2), (4, 1), (3, 2), (4, 2), (3, 3), (4, 3)]
    rng = np.random.default_rng(100 + k)
    nx, ny = sizes[k % len(sizes)]
    mesh = TriMesh(nx, ny, float(nx), float(ny))
    n = mesh.n_nodes
    w = lumped_weights(mesh)
    A = (rng.uniform(0.1, 2.0) * assemble_h1_form(mesh) + sp.diags(rng.uniform(0.5, 2.0, n) * w))
    lower, upper = -rng.uniform(0.2, 1.0, n), rng.uniform(0.2, 1.0, n)
    b = rng.standard_normal(n) * w * rng.uniform(0.2, 1.5)
    rhs = float(w @ rng.uniform(lower, upper))
    return QPProblem(A.tocsr(), b, lower, upper, weights=w, rhs=rhs)


def test_criterion_2_pdas_matches_enumeration():
    t0 = time.perf_counter()
    worst, n_active = 0.0, []
    for k in range(200):
        qp = random_instance(k)
        assert qp.n <= 20
        y, state = solve_projection(qp)
        A = qp.A.toarray()
        ref = qp_enumeration(A, qp.b, qp.lower, qp.upper, qp.weights, qp.rhs)
        d = y - ref
        worst = max(worst, float(np.sqrt(max(d @ A @ d, 0.0))))
        n_active.append(int(state.active.sum()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 60
    record(2, ok, f"200 instances, worst A-norm error {worst:.1e}, "
                  f"up to {max(n_active)} active nodes, {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def h1_runs():
    """H1 solves on h = 2^-4, 2^-5, 2^-6; the 2^-5 one is strict (criterion 3)."""
    runs = {}
    for e in (4, 5, 6):
        spec = RunSpec(h=2.0 ** -e, metric="h1", **MESH_STUDY)
        try:
            runs["h1", e] = timed(run_single, spec, strict=(e == 5))
        except InvariantViolation as exc:
            runs["h1", e] = (exc, 0.0)
    return runs


@pytest.fixture(scope="module")
def mesh_runs(h1_runs):
    """Adds the L2 solves. The 2^-6 one is capped at twice the 2^-5 count:
    reaching the cap already shows the required growth."""
    runs = dict(h1_runs)
    for e in (4, 5, 6):
        cap = 20000 if e < 6 else 2 * runs["l2", 5][0][2].iterations
        spec = RunSpec(h=2.0 ** -e, metric="l2", k_max=cap, **MESH_STUDY)
        runs["l2", e] = timed(run_single, spec)
    return runs


def test_criterion_3_invariants_strict_run(h1_runs):
    out, elapsed = h1_runs["h1", 5]
    if isinstance(out, Exception):
        record(3, False, f"strict run raised: {out}")
        pytest.fail(str(out))
    row, s, trace = out
    problem = RunSpec(h=2.0 ** -5, **MESH_STUDY).problem()
    msgs = verify_trace(trace)
    feas = max(trace.feasibility, default=0.0)
    ok = (not msgs and all(trace.descent_flags) and feas <= 1e-10
          and problem.feasible_set.violation(s) <= 1e-10 and row["terminate_reason"] == "tolerance"
          and elapsed < 300)
    record(3, ok, f"{trace.iterations} iterations, {len(msgs)} violations, "
                  f"max infeasibility {feas:.1e}, {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_4_mesh_independence(mesh_runs):
    its = {key: val[0][2].iterations for key, val in mesh_runs.items()}
    total = sum(val[1] for val in mesh_runs.values())
    h1 = [its["h1", e] for e in (4, 5, 6)]
    l2 = [its["l2", e] for e in (4, 5, 6)]
    capped = mesh_runs["l2", 6][0][0]["terminate_reason"] == "k_max"
    h1_ok = all(max(a, b) / min(a, b) <= 2 for a, b in zip(h1, h1[1:]))
    l2_ok = all(b >= 2 * a for a, b in zip(l2, l2[1:]))
    converged = all(mesh_runs[key][0][0]["terminate_reason"] == "tolerance"
                    for key in mesh_runs if key != ("l2", 6))
    ok = h1_ok and l2_ok and converged and total < 3600
    record(4, ok, f"h1 {h1}, l2 {l2}{' (2^-6 capped: lower bound)' if capped else ''}, "
                  f"{total:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_5_lambda_scaling(mesh_runs):
    med = {key: lambda_tail_median(val[0][2]) for key, val in mesh_runs.items()}
    l2 = [med["l2", e] for e in (4, 5, 6)]
    h1 = [med["h1", e] for e in (4, 5, 6)]
    l2_ratios = [a / b for a, b in zip(l2, l2[1:])]
    h1_spread = max(h1) / min(h1)
    ok = all(2.5 <= r <= 6 for r in l2_ratios) and h1_spread < 2
    record(5, ok, f"l2 ratios per halving {', '.join(f'{r:.2f}' for r in l2_ratios)}, "
                  f"h1 spread {h1_spread:.2f}")
    assert ok


@pytest.mark.slow
def test_criterion_6_second_order_speedup():
    common = dict(h=2.0 ** -5, epsilon=0.02, gamma=0.01, tol=1e-5, init="random", seed=0)
    (so, _, so_trace), _ = timed(run_single, RunSpec(metric="second_order", **common))
    (h1, _, h1_trace), _ = timed(run_single, RunSpec(metric="h1", **common))
    ratio = so_trace.iterations / h1_trace.iterations
    j_ok = so["j_final"] <= h1["j_final"] + 1e-3 * abs(h1["j_final"])
    converged = so["terminate_reason"] == h1["terminate_reason"] == "tolerance"
    ok = ratio <= 1 / 3 and j_ok and converged
    record(6, ok, f"second_order {so_trace.iterations} vs h1 {h1_trace.iterations} iterations "
                  f"(ratio {ratio:.2f}), j {so['j_final']:.6f} vs {h1['j_final']:.6f}")
    assert ok


@pytest.mark.slow
def test_criterion_7_lbfgs_mesh_independence():
    its, reasons = [], []
    for e in (5, 6, 7):
        row, _, trace = run_single(RunSpec(h=2.0 ** -e, metric="lbfgs", **MESH_STUDY))
        its.append(trace.iterations)
        reasons.append(row["terminate_reason"])
    med = float(np.median(its))
    spread = max(abs(i - med) for i in its) / med
    ok = spread <= 0.3 and all(r == "tolerance" for r in reasons)
    record(7, ok, f"iterations {its}, max deviation from median {100 * spread:.0f}%")
    assert ok


def test_criterion_8_fixed_point_terminates_at_once():
    params = ProblemParams(load=LoadCase(traction=(0.0, 0.0)))
    problem = PhaseFieldProblem(TriMesh.from_h(2.0 ** -4), params)
    s, trace = vmpt_solve(problem, MetricFactory("h1"), SolverConfig(tol=1e-8),
                          phi0=np.zeros(problem.n))
    norm_v0 = trace.rows[0][3]
    ok = trace.iterations == 0 and trace.reason == "tolerance" and norm_v0 <= 1e-8
    record(8, ok, f"{trace.iterations} iterations, |v0|_H = {norm_v0:.1e}")
    assert ok


def test_criterion_9_metric_equivalences():
    problem = PhaseFieldProblem.cantilever(2.0 ** -4)
    rng = np.random.default_rng(3)
    s = project_feasible(rng.uniform(-0.5, 0.5, problem.n), problem.feasible_set)
    terms = make_second_order_metric(problem, problem.state(s, exact=True)).terms
    akso_err = 0.0
    for _ in range(20):
        p, y = rng.standard_normal((2, problem.n))
        a2 = terms.akso2(p, y)
        akso_err = max(akso_err, abs(terms.akso_cross(p, y) - a2) / max(1.0, abs(a2)))

    ge = problem.params.gamma * problem.params.epsilon
    iterates = {}
    for kind, lam in (("scaled_h1", 1.0), ("h1", 1.0 / ge)):
        seq = []
        cfg = SolverConfig(lambda0=lam, adapt_lambda=False, k_max=10, tol=0.0)
        vmpt_solve(problem, MetricFactory(kind), cfg, phi0=s,
                   callback=lambda k, x, tr, seq=seq: seq.append(x.copy()))
        iterates[kind] = seq
    a, b = iterates["scaled_h1"], iterates["h1"]
    seq_err = max(problem.h_norm(x - y) / max(1.0, problem.h_norm(y)) for x, y in zip(a, b))
    ok = akso_err <= 1e-9 and len(a) == len(b) == 10 and seq_err <= 1e-10
    record(9, ok, f"akso vs akso2 {akso_err:.1e}, iterate difference {seq_err:.1e} "
                  f"over {len(a)} iterations")
    assert ok
