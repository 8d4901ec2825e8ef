"""QP solver checked against an independent interior-point oracle (cvxopt)
and analytic solutions."""
import numpy as np
import pytest

cvxopt = pytest.importorskip("cvxopt")
from cvxopt import matrix, solvers

from lanelearn.errors import InfeasibleProblemError, SolverError
from lanelearn.qp import solve_qp

solvers.options["show_progress"] = False
solvers.options["abstol"] = 1e-10
solvers.options["reltol"] = 1e-10
solvers.options["feastol"] = 1e-10


def _oracle(H, g, A=None, b=None, C=None, d=None):
    args = [matrix(H), matrix(g)]
    if C is not None:
        args += [matrix(C), matrix(d)]
    else:
        args += [matrix(np.zeros((0, len(g)))), matrix(np.zeros(0))]
    if A is not None:
        args += [matrix(A), matrix(b)]
    sol = solvers.qp(*args)
    assert sol["status"] == "optimal"
    return np.array(sol["x"]).ravel()


def _random_spd(rng, n, scale=1.0):
    a = rng.normal(size=(n, n))
    return a @ a.T + scale * n * np.eye(n)


def test_unconstrained_matches_linear_solve():
    rng = np.random.default_rng(0)
    H = _random_spd(rng, 8)
    g = rng.normal(size=8)
    res = solve_qp(H, g)
    assert np.allclose(res.x, np.linalg.solve(H, -g), atol=1e-10)
    assert res.kkt_residual < 1e-8


def test_equality_constrained_matches_kkt_elimination():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n, m = 10, 3
        H = _random_spd(rng, n)
        g = rng.normal(size=n)
        A = rng.normal(size=(m, n))
        b = rng.normal(size=m)
        kkt = np.block([[H, A.T], [A, np.zeros((m, m))]])
        rhs = np.concatenate([-g, b])
        direct = np.linalg.solve(kkt, rhs)
        res = solve_qp(H, g, A=A, b=b)
        assert np.allclose(res.x, direct[:n], atol=1e-8)
        assert np.allclose(res.eq_duals, direct[n:], atol=1e-7)
        assert res.kkt_residual < 1e-8


def test_box_constrained_matches_oracle():
    rng = np.random.default_rng(2)
    for trial in range(30):
        n = rng.integers(3, 12)
        H = _random_spd(rng, n)
        g = rng.normal(size=n) * 5
        lo = -rng.uniform(0.1, 1.0, n)
        hi = rng.uniform(0.1, 1.0, n)
        C = np.vstack([np.eye(n), -np.eye(n)])
        d = np.concatenate([hi, -lo])
        res = solve_qp(H, g, C=C, d=d)
        x_oracle = _oracle(H, g, C=C, d=d)
        assert np.allclose(res.x, x_oracle, atol=1e-6), f"trial {trial}"
        assert (C @ res.x <= d + 1e-9).all()
        assert res.kkt_residual < 1e-7
        assert (res.ineq_duals >= -1e-9).all()


def test_mixed_constraints_match_oracle():
    rng = np.random.default_rng(3)
    for trial in range(30):
        n = int(rng.integers(4, 14))
        m = int(rng.integers(1, 3))
        H = _random_spd(rng, n)
        g = rng.normal(size=n) * 3
        A = rng.normal(size=(m, n))
        b = rng.normal(size=m) * 0.5
        k = int(rng.integers(2, 3 * n))
        C = rng.normal(size=(k, n))
        d = rng.uniform(0.5, 2.0, k)   # interior point exists near the origin
        res = solve_qp(H, g, A=A, b=b, C=C, d=d)
        x_oracle = _oracle(H, g, A=A, b=b, C=C, d=d)
        assert np.allclose(res.x, x_oracle, atol=5e-6), f"trial {trial}"
        assert res.kkt_residual < 1e-7


def test_active_constraints_bind():
    # minimize distance to a point outside the box: solution sits on the rim
    H = 2 * np.eye(2)
    g = -2 * np.array([5.0, 0.3])
    C = np.vstack([np.eye(2), -np.eye(2)])
    d = np.array([1.0, 1.0, 1.0, 1.0])
    res = solve_qp(H, g, C=C, d=d)
    assert np.allclose(res.x, [1.0, 0.3], atol=1e-10)
    assert 0 in res.active
    assert res.ineq_duals[0] > 0


def test_infeasible_detected():
    H = np.eye(2)
    g = np.zeros(2)
    C = np.array([[1.0, 0.0], [-1.0, 0.0]])
    d = np.array([-1.0, -1.0])   # x0 <= -1 and x0 >= 1
    with pytest.raises(InfeasibleProblemError):
        solve_qp(H, g, C=C, d=d)


def test_inconsistent_equalities_detected():
    H = np.eye(2)
    g = np.zeros(2)
    A = np.array([[1.0, 0.0], [1.0, 0.0]])
    b = np.array([0.0, 1.0])
    with pytest.raises((InfeasibleProblemError, SolverError)):
        solve_qp(H, g, A=A, b=b)


def test_redundant_consistent_equality_ok():
    H = np.eye(3)
    g = np.array([1.0, -2.0, 0.5])
    A = np.array([[1.0, 1.0, 0.0], [2.0, 2.0, 0.0]])
    b = np.array([1.0, 2.0])
    res = solve_qp(H, g, A=A, b=b)
    assert abs(res.x[0] + res.x[1] - 1.0) < 1e-9
    assert res.kkt_residual < 1e-8


def test_indefinite_hessian_rejected():
    H = np.diag([1.0, -1.0])
    with pytest.raises(SolverError):
        solve_qp(H, np.zeros(2))


def test_duals_certify_optimality():
    """Perturbing an active bound outward strictly lowers the objective."""
    rng = np.random.default_rng(4)
    H = _random_spd(rng, 6)
    g = rng.normal(size=6) * 4
    C = np.vstack([np.eye(6), -np.eye(6)])
    d = 0.3 * np.ones(12)
    res = solve_qp(H, g, C=C, d=d)
    for i in res.active:
        if res.ineq_duals[i] < 1e-8:
            continue
        d2 = d.copy()
        d2[i] += 0.05
        relaxed = solve_qp(H, g, C=C, d=d2)
        assert relaxed.objective < res.objective - 1e-12
