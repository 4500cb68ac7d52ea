import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbmpc import _kernels
from kbmpc.qpsolver import (INFEASIBLE, MAX_ITER, SOLVED, NotPositiveDefiniteError, QpProblem, QpSolver,
                            dump_problem, kkt_residuals, load_problem, solve)

BACKENDS = ["python"] + (["cython"] if _kernels.BACKEND == "cython" else [])


def random_qp(rng, n, mc):
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    G = rng.normal(size=(mc, n))
    h = G @ rng.normal(size=n) + rng.uniform(0, 1, mc)
    return QpProblem(P, 3 * rng.normal(size=n), G, h)


def brute_force(qp):
    """Enumerate active sets up to size 3; return the best KKT point's objective."""
    best = None
    for k in range(min(qp.n_ineq, qp.n, 3) + 1):
        for S in itertools.combinations(range(qp.n_ineq), k):
            S = list(S)
            K = np.block([[qp.P, qp.G[S].T], [qp.G[S], np.zeros((k, k))]])
            try:
                s = np.linalg.solve(K, np.concatenate([-qp.q, qp.h[S]]))
            except np.linalg.LinAlgError:
                continue
            w = s[:qp.n]
            if np.all(qp.G @ w <= qp.h + 1e-9) and np.all(s[qp.n:] >= -1e-9):
                f = qp.objective(w)
                best = f if best is None else min(best, f)
    return best


@pytest.fixture(params=BACKENDS)
def solver(request):
    return QpSolver(backend=_kernels.get_backend(request.param))


def test_unconstrained_closed_form(solver):
    sol = solver.solve(QpProblem(np.eye(2), [-1.0, -2.0], np.zeros((0, 2)), []))
    assert sol.status == SOLVED
    np.testing.assert_allclose(sol.w, [1.0, 2.0])


def test_halfspace_projection(solver):
    sol = solver.solve(QpProblem(np.eye(2), np.zeros(2), [[1.0, 0.0]], [-1.0]))
    assert sol.status == SOLVED
    np.testing.assert_allclose(sol.w, [-1.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(sol.duals, [1.0], atol=1e-9)


def test_random_problems_against_oracle(solver):
    rng = np.random.default_rng(11)
    for i in range(40):
        n = int(rng.integers(2, 41))
        mc = int(rng.integers(0, 4)) if i % 2 == 0 else int(rng.integers(4, 201))
        qp = random_qp(rng, n, mc)
        sol = solver.solve(qp)
        assert sol.status == SOLVED
        res = kkt_residuals(qp, sol.w, sol.duals)
        assert max(res.values()) <= 1e-6
        if mc <= 3:
            assert abs(qp.objective(sol.w) - brute_force(qp)) <= 1e-6


def test_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    rng = np.random.default_rng(5)
    for _ in range(10):
        qp = random_qp(rng, 20, 60)
        a = QpSolver(backend=_kernels.get_backend("python")).solve(qp)
        b = QpSolver(backend=_kernels.get_backend("cython")).solve(qp)
        np.testing.assert_allclose(a.w, b.w, atol=1e-7)


def test_non_pd_rejected(solver):
    with pytest.raises(NotPositiveDefiniteError):
        solver.solve(QpProblem(np.diag([1.0, -1.0]), np.zeros(2), np.zeros((0, 2)), []))


def test_infeasible_reported(solver):
    G = np.array([[1.0, 0.0], [-1.0, 0.0]])
    sol = solver.solve(QpProblem(np.eye(2), np.zeros(2), G, [-1.0, -1.0]))  # w1 <= -1 and w1 >= 1
    assert sol.status == INFEASIBLE


def test_infeasible_constant_row(solver):
    sol = solver.solve(QpProblem(np.eye(2), np.zeros(2), np.zeros((1, 2)), [-1.0]))
    assert sol.status == INFEASIBLE


def test_validation():
    with pytest.raises(ValueError, match="symmetric"):
        QpProblem([[1.0, 1.0], [0.0, 1.0]], np.zeros(2), np.zeros((0, 2)), [])
    with pytest.raises(ValueError, match="finite"):
        QpProblem(np.eye(2), [np.nan, 0.0], np.zeros((0, 2)), [])


def test_determinism_and_scale_invariance(solver, rng):
    qp = random_qp(rng, 15, 40)
    a = solver.solve(qp)
    b = solver.solve(qp)
    assert a.w.tobytes() == b.w.tobytes()
    scaled = solver.solve(QpProblem(7.5 * qp.P, 7.5 * qp.q, qp.G, qp.h))
    np.testing.assert_allclose(scaled.w, a.w, atol=1e-6)


def test_warm_start(solver, rng):
    qp = random_qp(rng, 30, 80)
    cold = solver.solve(qp)
    warm = solver.solve(qp, warm_w=cold.w, warm_lam=cold.duals)
    assert warm.status == SOLVED
    assert warm.iterations <= cold.iterations
    np.testing.assert_allclose(warm.w, cold.w, atol=1e-7)


def test_iteration_cap_without_polish(rng):
    qp = random_qp(rng, 30, 120)
    sol = QpSolver(max_iter=10, chunk=10, polish=False, tol=1e-12).solve(qp)
    assert sol.status == MAX_ITER
    assert sol.iterations == 10


def test_module_level_solve(rng):
    qp = random_qp(rng, 5, 8)
    assert solve(qp).status == SOLVED


def test_problem_dump_roundtrip(tmp_path, rng):
    qp = random_qp(rng, 4, 3)
    dump_problem(qp, tmp_path / "qp.bin", note="regression")
    back = load_problem(tmp_path / "qp.bin")
    for name in ("P", "q", "G", "h"):
        assert getattr(back, name).tobytes() == getattr(qp, name).tobytes()


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 12), st.integers(0, 2 ** 32 - 1))
def test_kkt_property(n, mc, seed):
    qp = random_qp(np.random.default_rng(seed), n, mc)
    sol = QpSolver().solve(qp)
    assert sol.status == SOLVED
    assert max(kkt_residuals(qp, sol.w, sol.duals).values()) <= 1e-6
