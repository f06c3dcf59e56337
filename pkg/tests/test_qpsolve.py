import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpmpc.qpsolve import (INF, MAX_ITER, PRIMAL_INFEASIBLE, SOLVED, QpProblem, QpSolution,
                           QpSolver, dump_problem, load_problem, solve, verify_kkt)

from oracles import active_set_oracle, random_qp as random_problem


class TestProblem:
    def test_rejects_crossed_bounds(self):
        with pytest.raises(ValueError):
            QpProblem(np.eye(1), [0.0], [[1.0]], [1.0], [0.0])

    def test_shapes(self):
        p = QpProblem(np.eye(3), np.zeros(3), np.zeros((0, 3)), [], [])
        assert (p.n, p.m) == (3, 0)


class TestToyProblems:
    def test_lower_bound_active(self):
        # min x^2 s.t. x >= 1
        prob = QpProblem([[2.0]], [0.0], [[1.0]], [1.0], [INF])
        sol = solve(prob)
        assert sol.status == SOLVED
        assert sol.x[0] == pytest.approx(1.0, abs=1e-6)
        assert sol.y[0] == pytest.approx(-2.0, abs=1e-5)
        assert verify_kkt(prob, sol)[0]

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=8))
    def test_unconstrained(self, q):
        q = np.array(q)
        prob = QpProblem(np.eye(len(q)), q, np.zeros((0, len(q))), [], [])
        sol = solve(prob)
        assert sol.status == SOLVED
        np.testing.assert_allclose(sol.x, -q, atol=1e-6)

    def test_all_zero_problem(self):
        prob = QpProblem(np.zeros((2, 2)), np.zeros(2), np.zeros((0, 2)), [], [])
        sol = solve(prob)
        np.testing.assert_array_equal(sol.x, 0.0)
        ok, report = verify_kkt(prob, sol)
        assert ok and all(v == 0 for v in report.values())

    def test_equality_row(self):
        # min (x0 - 1)^2 + (x1 - 2)^2 s.t. x0 + x1 = 1
        prob = QpProblem(2 * np.eye(2), [-2.0, -4.0], [[1.0, 1.0]], [1.0], [1.0])
        sol = solve(prob)
        np.testing.assert_allclose(sol.x, [0.0, 1.0], atol=1e-6)
        assert verify_kkt(prob, sol)[0]

    def test_primal_infeasible(self):
        prob = QpProblem([[1.0]], [0.0], [[1.0], [1.0]], [1.0, -INF], [INF, 0.0])
        sol = solve(prob)
        assert sol.status == PRIMAL_INFEASIBLE

    def test_max_iter_flagged(self, rng):
        prob = random_problem(rng, 8, 16)
        sol = solve(prob, max_iter=3, polish=False)
        assert sol.status == MAX_ITER
        assert sol.iterations == 3
        assert np.all(np.isfinite(sol.x))

    def test_deterministic(self, rng):
        prob = random_problem(rng, 6, 10)
        a, b = solve(prob), solve(prob)
        np.testing.assert_array_equal(a.x, b.x)
        assert a.iterations == b.iterations


class TestVerifyKkt:
    def test_perturbed_primal_fails(self):
        prob = QpProblem([[2.0]], [0.0], [[1.0]], [1.0], [INF])
        sol = solve(prob)
        bad = QpSolution(sol.x + 1e-2, sol.y, sol.status, sol.iterations, 0.0, 0.0)
        ok, report = verify_kkt(prob, bad)
        assert not ok
        assert report["stationarity"] > 0

    def test_wrong_sign_dual_detected(self):
        prob = QpProblem([[2.0]], [0.0], [[1.0]], [1.0], [INF])
        # x = 2 is feasible and stationary with y = -4, but the row is not active
        sol = QpSolution(np.array([2.0]), np.array([-4.0]), SOLVED, 0, 0.0, 0.0)
        ok, report = verify_kkt(prob, sol)
        assert not ok and report["complementarity"] == pytest.approx(4.0)


class TestActiveSetOracle:
    def test_oracle_on_known_problem(self):
        prob = QpProblem([[2.0]], [0.0], [[1.0]], [1.0], [INF])
        x, y = active_set_oracle(prob)
        assert x[0] == pytest.approx(1.0) and y[0] == pytest.approx(-2.0)

    def test_matches_enumeration_on_random_problems(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            prob = random_problem(rng)
            sol = solve(prob)
            assert sol.status == SOLVED
            x_ref, _ = active_set_oracle(prob)
            worst = max(worst, float(np.max(np.abs(sol.x - x_ref), initial=0.0)))
            assert verify_kkt(prob, sol, 1e-5)[0]
        assert worst < 1e-4


@given(st.integers(0, 2 ** 31))
def test_no_sampled_feasible_point_is_better(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, int(rng.integers(1, 5)), int(rng.integers(1, 8)), offset=3.0,
                          width=(0.1, 1.0))
    sol = solve(prob)
    assert sol.status == SOLVED
    samples = sol.x + rng.uniform(-3, 3, size=(1000, prob.n))
    Ax = samples @ prob.A.T
    feasible = samples[np.all((Ax >= prob.l) & (Ax <= prob.u), axis=1)]
    if len(feasible):
        vals = 0.5 * np.einsum("ij,jk,ik->i", feasible, prob.P, feasible) + feasible @ prob.q
        assert prob.objective(sol.x) <= vals.min() + 1e-6


@given(st.integers(0, 2 ** 31), st.sampled_from([1e-3, 0.1, 7.0, 1e3]))
def test_scaling_invariance(seed, c):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, int(rng.integers(1, 11)), int(rng.integers(0, 21)), offset=3.0,
                          width=(0.1, 1.0))
    scaled = QpProblem(c * prob.P, c * prob.q, prob.A, prob.l, prob.u)
    a, b = solve(prob), solve(scaled)
    assert a.status == b.status == SOLVED
    np.testing.assert_allclose(a.x, b.x, atol=1e-4)


def test_solver_reuses_factorization(rng):
    prob = random_problem(rng, 6, 12, one_sided=0.0)
    solver = QpSolver(prob.P, prob.A, adaptive_rho=False, q_hint=prob.q)
    count = solver.n_factorizations
    for shift in np.linspace(0.0, 0.3, 5):
        sol = solver.solve(prob.q, prob.l - shift, prob.u + shift, max_iter=50000)
        assert sol.status == SOLVED
    assert solver.n_factorizations == count


def test_dump_roundtrip(tmp_path, rng):
    prob = random_problem(rng, 5, 7)
    path = tmp_path / "qp.txt"
    dump_problem(prob, path)
    back = load_problem(path)
    for name in ("P", "q", "A", "l", "u"):
        np.testing.assert_array_equal(getattr(back, name), getattr(prob, name))


def test_dump_roundtrip_without_constraints(tmp_path):
    prob = QpProblem(np.eye(2), [1.0, 2.0], np.zeros((0, 2)), [], [])
    dump_problem(prob, tmp_path / "qp.txt")
    back = load_problem(tmp_path / "qp.txt")
    assert back.m == 0 and solve(back).x == pytest.approx([-1.0, -2.0], abs=1e-6)


def test_warm_start_on_closed_loop_sequence():
    from gpmpc.dynamics import QuadParams, integrate_steps, saturate_input
    from gpmpc.harness.reference import Reference
    from gpmpc.smpc import MpcConfig, MpcController

    params = QuadParams()
    cfg = MpcConfig(u_hover=params.hover_thrust)
    ctrl = MpcController(params, cfg)
    ref = Reference("circuit", (0.0, 0.0, 3.0), 10.0, 2.0, 1.5, 2.0, 0.0)
    x = ref.state(0.0)
    x[:3] += [1.0, -1.0, 0.5]
    warm, cold = [], []
    for c in range(45):
        t = c / 30
        res = ctrl.solve_nominal(x, ref.window(t, cfg.dt, cfg.horizon))
        qp = res.problem.qp
        assert res.solution.status == SOLVED and not res.softened
        warm.append(res.solution.iterations)
        cold.append(QpSolver(qp.P, qp.A).solve(qp.q, qp.l, qp.u, **ctrl.solver_opts).iterations)
        u = saturate_input(res.first + [cfg.u_hover, 0, 0, 0])
        x, _ = integrate_steps(x, u, params, 1 / 600, 20)
    warm, cold = np.array(warm[1:]), np.array(cold[1:])
    assert np.all(warm <= 2 * cold)
