import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import solve_discrete_are, solve_discrete_lyapunov
from scipy.special import ndtr

from gpmpc.dynamics import NU, NX, QuadParams, discretize_exact, linearize_hover
from gpmpc.qpsolve import INF, SOLVED, QpProblem, solve, verify_kkt
from gpmpc.smpc import (SOFT_LINEAR, AugmentedModel, MpcConfig, MpcController, Polytope,
                        build_augmented, condense, dare_residual, disturbance_columns, dlqr,
                        prediction_matrix, propagate_uncertainty, quantile, tighten,
                        tighten_sequence, tightening_level)
from gpmpc.ssgp import GpBelief, GpModel, Hyperparams, build_lti, filter_batch, predict_horizon

from oracles import active_set_oracle

PARAMS = QuadParams()


@pytest.fixture(scope="module")
def controller():
    return MpcController(PARAMS, MpcConfig(u_hover=PARAMS.hover_thrust))


@pytest.fixture(scope="module")
def gps():
    return [build_lti(Hyperparams(0.5 + 0.3 * i, 1.0 + 0.5 * i, 0.01), 6, 0.1) for i in range(3)]


def constant_gp(dt=0.1):
    """First-order surrogate ``z' = 0, y = z``: a held constant disturbance."""
    return GpModel(Hyperparams(1.0, 1.0, 1e-3), 1, np.zeros((1, 1)), np.ones((1, 1)),
                   np.ones((1, 1)), 0.0, np.zeros((1, 1)), dt, np.eye(1), np.zeros((1, 1)))


class TestPolytope:
    def test_box(self):
        box = Polytope.box([1.0, 2.0], [3.0, 4.0])
        assert box.contains([1.0, -4.0]) and not box.contains([1.1, 0.0])
        assert box.labels == ["z0<=", "z1<=", "-z0<=", "-z1<="]

    def test_rejects_zero_row(self):
        with pytest.raises(ValueError):
            Polytope([[1.0, 0.0], [0.0, 0.0]], [1.0, 1.0])

    def test_rejects_infinite_offset(self):
        with pytest.raises(ValueError):
            Polytope([[1.0]], [np.inf])


class TestConfig:
    def test_defaults(self):
        cfg = MpcConfig()
        assert cfg.horizon == 25
        np.testing.assert_array_equal(np.diag(cfg.Q), [6] * 6 + [1] * 6)
        np.testing.assert_array_equal(np.diag(cfg.R), [5e3, 4e4, 4e4, 4e4])
        np.testing.assert_allclose(cfg.state_bounds[6:],
                                   [math.pi / 3, math.pi / 3, math.pi / 5] + [2 * math.pi] * 3)

    def test_input_box_around_trim(self):
        box = MpcConfig(u_hover=0.3).input_set()
        np.testing.assert_allclose(box.h, [0.7, 1, 1, 1, 0.3, 1, 1, 1])

    @pytest.mark.parametrize("kw", [dict(horizon=0), dict(R=np.zeros((4, 4))),
                                    dict(Q=-np.eye(12)), dict(p_x=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            MpcConfig(**kw)


class TestAugmented:
    def test_zero_coupling_matches_nominal(self, gps, rng):
        lin = linearize_hover(PARAMS)
        silent = [GpModel(g.hyper, g.order, g.F, g.L, np.zeros_like(g.H), g.q, g.Pinf, g.dt,
                          g.Fd, g.Qd) for g in gps]
        aug = build_augmented(lin.A, lin.B, silent, 0.1)
        nom = discretize_exact(lin.A, lin.B, 0.1)
        x = np.concatenate([rng.normal(size=NX), rng.normal(size=18)])
        u = rng.normal(size=NU)
        np.testing.assert_allclose((aug.Ad @ x + aug.Bd @ u)[:NX], nom.Ad @ x[:NX] + nom.Bd @ u,
                                   rtol=0, atol=1e-13)

    def test_constant_disturbance_response(self):
        lin = linearize_hover(PARAMS)
        aug = build_augmented(lin.A, lin.B, [constant_gp() for _ in range(3)], 0.1)
        d = np.array([0.4, -0.2, 0.1])
        x = np.concatenate([np.zeros(NX), d])
        a = PARAMS.k_drag / PARAMS.mass
        for k in range(1, 31):
            x = aug.Ad @ x
            t = 0.1 * k
            v = d * (1 - math.exp(-a * t)) / a
            p = d / a * (t - (1 - math.exp(-a * t)) / a)
            np.testing.assert_allclose(x[3:6], v, rtol=1e-10)
            np.testing.assert_allclose(x[0:3], p, rtol=1e-10)
            np.testing.assert_array_equal(x[6:12], 0.0)
            np.testing.assert_allclose(x[12:], d, rtol=0, atol=0)

    def test_block_upper_triangular(self, gps):
        lin = linearize_hover(PARAMS)
        aug = build_augmented(lin.A, lin.B, gps, 0.1)
        assert aug.n == NX + 18
        np.testing.assert_array_equal(aug.Ad[NX:, :NX], 0.0)
        np.testing.assert_array_equal(aug.Bd[NX:], 0.0)
        for sl, g in zip(aug.gp_slices(), gps):
            np.testing.assert_allclose(aug.Ad[sl, sl], g.Fd, atol=1e-12)
        # GP i enters the velocity row i only
        coupling = aug.A_cont[:NX, NX:]
        assert np.count_nonzero(coupling) == 3
        for i, row in enumerate((3, 4, 5)):
            assert coupling[row, 6 * i] == 1.0

    def test_dimension_errors(self, gps):
        lin = linearize_hover(PARAMS)
        with pytest.raises(ValueError):
            build_augmented(lin.A[:6], lin.B, gps, 0.1)
        with pytest.raises(ValueError):
            build_augmented(lin.A, lin.B, gps, 0.2)


class TestDlqr:
    def test_scalar_golden_ratio(self):
        K, P = dlqr([[1.0]], [[1.0]], [[1.0]], [[1.0]])
        phi = (1 + math.sqrt(5)) / 2
        assert P[0, 0] == pytest.approx(phi, abs=1e-9)
        assert K[0, 0] == pytest.approx(phi - 1, abs=1e-9)

    def test_zero_state_weight(self):
        K, P = dlqr([[0.5, 0.1], [0.0, 0.3]], [[1.0], [0.0]], np.zeros((2, 2)), [[1.0]])
        np.testing.assert_array_equal(K, 0.0)
        np.testing.assert_array_equal(P, 0.0)

    def test_quad_model(self, controller):
        c = controller
        cfg = c.config
        assert dare_residual(c.P, c.Ad, c.Bd, cfg.Q, cfg.R) < 1e-8
        ref = solve_discrete_are(c.Ad, c.Bd, cfg.Q, cfg.R)
        np.testing.assert_allclose(c.P, ref, rtol=1e-6, atol=1e-8 * np.abs(ref).max())
        assert max(abs(np.linalg.eigvals(c.Ad - c.Bd @ c.K))) < 1.0

    def test_unstabilizable_raises(self):
        with pytest.raises(RuntimeError):
            dlqr([[2.0]], [[0.0]], [[1.0]], [[1.0]], max_iter=200)


class TestTube:
    def test_zero_disturbance(self, controller):
        c = controller
        tube = propagate_uncertainty(np.zeros((3, 25)), c.K, c.Ad, c.Bd, c.C_dist, 25)
        np.testing.assert_array_equal(tube.state_cov, 0.0)
        np.testing.assert_array_equal(tube.input_cov, 0.0)

    def test_telescoping_without_feedback(self):
        C = np.array([[1.0], [2.0]])
        tube = propagate_uncertainty(np.full((1, 6), 0.3), np.zeros((1, 2)), np.eye(2),
                                     np.ones((2, 1)), C, 6)
        for k in range(7):
            np.testing.assert_allclose(tube.state_cov[k], k * 0.3 * C @ C.T, rtol=1e-14)

    def test_converges_to_lyapunov(self, controller):
        c = controller
        n = 400
        tube = propagate_uncertainty(np.full((3, n), 0.5), c.K, c.Ad, c.Bd, c.C_dist, n)
        Acl = c.Ad - c.Bd @ c.K
        limit = solve_discrete_lyapunov(Acl, 0.5 * c.C_dist @ c.C_dist.T)
        assert np.trace(tube.state_cov[-1]) == pytest.approx(np.trace(limit), rel=1e-6)

    def test_input_covariance_and_symmetry(self, controller, rng):
        c = controller
        tube = propagate_uncertainty(rng.uniform(0, 1, (3, 25)), c.K, c.Ad, c.Bd, c.C_dist, 25)
        np.testing.assert_array_equal(tube.state_cov[0], 0.0)
        for k in range(25):
            np.testing.assert_allclose(tube.input_cov[k], c.K @ tube.state_cov[k] @ c.K.T,
                                       rtol=1e-12, atol=1e-15)
        for S in tube.state_cov:
            np.testing.assert_array_equal(S, S.T)
            assert np.min(np.linalg.eigvalsh(S)) > -1e-12


class TestQuantile:
    def test_median(self):
        assert quantile(0.5) == 0.0

    def test_known_value(self):
        assert quantile(0.975) == pytest.approx(1.959964, abs=1e-6)

    def test_against_extended_precision(self):
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 40
        for p in [1e-9, 1e-5, 0.01, 0.3, 0.5, 0.8, 0.997917, 1 - 1e-6, 1 - 1e-9]:
            exact = mp.sqrt(2) * mp.erfinv(2 * mp.mpf(p) - 1)
            assert abs(quantile(p) - float(exact)) < 1e-9

    @given(st.floats(1e-9, 1 - 1e-9))
    def test_roundtrip(self, p):
        assert ndtr(quantile(p)) == pytest.approx(p, abs=1e-9)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_domain(self, p):
        with pytest.raises(ValueError):
            quantile(p)


class TestTightening:
    def test_level_for_default_state_dimension(self):
        level = tightening_level(0.95, 12)
        assert level == pytest.approx(1 - (1 / 12 - 1.95 / 24), rel=1e-15)
        assert level == pytest.approx(0.997917, abs=5e-7)
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 30
        exact = mp.sqrt(2) * mp.erfinv(2 * (1 - mp.mpf("0.05") / 24) - 1)
        assert quantile(level) == pytest.approx(float(exact), abs=1e-9)
        assert quantile(level) == pytest.approx(2.866, abs=1e-3)

    def test_zero_covariance_is_identity(self):
        box = MpcConfig().state_set()
        out = tighten(box, np.zeros((12, 12)), 0.95, 12)
        np.testing.assert_array_equal(out.h, box.h)
        np.testing.assert_array_equal(out.H, box.H)

    def test_single_row_by_hand(self):
        # choose p so that the quantile is exactly 2 for one dimension
        p = 2 * ndtr(2.0) - 1
        poly = Polytope([[1.0, 0.0, 0.0]], [15.0])
        assert quantile(tightening_level(p, 1)) == pytest.approx(2.0, abs=1e-12)
        assert tighten(poly, np.eye(3), p, 1).h[0] == pytest.approx(13.0, abs=1e-10)

    def test_rows_use_absolute_normals(self):
        poly = Polytope([[1.0, -2.0]], [10.0])
        z = quantile(tightening_level(0.9, 2))
        out = tighten(poly, np.diag([4.0, 9.0]), 0.9, 2)
        assert out.h[0] == pytest.approx(10.0 - z * (2.0 + 2.0 * 3.0))

    @given(st.lists(st.floats(0, 10), min_size=12, max_size=12),
           st.lists(st.floats(0, 10), min_size=12, max_size=12))
    def test_monotone(self, a, b):
        box = MpcConfig().state_set()
        small = np.minimum(a, b)
        big = np.maximum(a, b)
        h_small = tighten(box, np.diag(small), 0.95, 12).h
        h_big = tighten(box, np.diag(big), 0.95, 12).h
        assert np.all(h_big <= h_small + 1e-12)

    def test_sequence_matches_single(self, rng):
        box = MpcConfig().state_set()
        covs = np.array([np.diag(rng.uniform(0, 1, 12)) for _ in range(5)] + [np.zeros((12, 12))])
        seq = tighten_sequence(box, covs, 0.95, 12)
        for S, poly in zip(covs, seq):
            np.testing.assert_allclose(poly.h, tighten(box, S, 0.95, 12).h, rtol=1e-15)
        assert seq[0].h is not box.h


def test_tube_soundness_monte_carlo(controller, gps):
    c = controller
    N, n_roll, p_x = 25, 10_000, 0.95
    rng = np.random.default_rng(7)
    beliefs = []
    for i, g in enumerate(gps):
        b, _ = filter_batch(np.sin(0.3 * np.arange(50) + i), g)
        beliefs.append(b)
    dist_var = np.array([predict_horizon(b, g, N)[1] for b, g in zip(beliefs, gps)])
    tube = propagate_uncertainty(dist_var, c.K, c.Ad, c.Bd, c.C_dist, N)
    z = quantile(tightening_level(p_x, NX))
    margins = z * np.sqrt(np.diagonal(tube.state_cov, axis1=1, axis2=2))   # (N+1, NX)
    Acl = c.Ad - c.Bd @ c.K
    e = np.zeros((n_roll, NX))
    exceed_axis = np.zeros((N, NX))
    exceed_any = np.zeros(N)
    for k in range(N):
        w = rng.normal(size=(n_roll, 3)) * np.sqrt(dist_var[:, k])
        e = e @ Acl.T + w @ c.C_dist.T
        out = np.abs(e) > margins[k + 1]
        exceed_axis[k] = out.mean(axis=0)
        exceed_any[k] = out.any(axis=1).mean()
    p_fail = 1 - p_x
    bound = p_fail + 3 * math.sqrt(p_fail * (1 - p_fail) / n_roll)
    assert exceed_axis.max() < bound
    assert exceed_any.max() < bound


class TestCondense:
    def test_zero_problem_gives_zero_input(self, controller, gps):
        c = controller
        beliefs = [GpBelief(np.zeros(6), np.zeros((6, 6))) for _ in gps]
        res = c.solve_gp(np.zeros(NX), np.zeros((26, NX)), gps, beliefs,
                         dist_var=np.zeros((3, 25)))
        np.testing.assert_allclose(res.inputs, 0.0, atol=1e-9)
        res = c.solve_nominal(np.zeros(NX), np.zeros((26, NX)))
        np.testing.assert_allclose(res.inputs, 0.0, atol=1e-9)

    def test_one_step_expansion(self, rng):
        A = rng.normal(size=(3, 3))
        B = rng.normal(size=(3, 2))
        Q = np.diag([1.0, 2.0, 3.0])
        R = np.diag([0.5, 4.0])
        Pt = np.diag([7.0, 8.0, 9.0])
        cfg = MpcConfig(horizon=1, Q=Q, R=R)
        aug = AugmentedModel(A, B, A, B, np.zeros((3, 0)), [], nx=3)
        x0, r = rng.normal(size=3), rng.normal(size=(2, 3))
        big = Polytope(np.vstack([np.eye(3), -np.eye(3)]), np.full(6, 1e3))
        ubox = Polytope(np.vstack([np.eye(2), -np.eye(2)]), np.full(4, 1e3))
        prob = condense(aug, cfg, [big], [ubox], x0, r, Pt)
        e1 = A @ x0 - r[1]
        e0 = x0 - r[0]
        np.testing.assert_allclose(prob.qp.P, 2 * (B.T @ Pt @ B + R), rtol=1e-14)
        np.testing.assert_allclose(prob.qp.q, 2 * B.T @ Pt @ e1, rtol=1e-13)
        assert prob.const == pytest.approx(e1 @ Pt @ e1 + e0 @ Q @ e0, rel=1e-13)
        u = rng.normal(size=2)
        x1 = A @ x0 + B @ u
        direct = e0 @ Q @ e0 + (x1 - r[1]) @ Pt @ (x1 - r[1]) + u @ R @ u
        assert prob.cost(u) == pytest.approx(direct, rel=1e-12)

    def test_matches_sparse_formulation(self):
        # double integrator, three steps, state and input bounds active
        dt = 0.5
        A = np.array([[1.0, dt], [0.0, 1.0]])
        B = np.array([[0.5 * dt * dt], [dt]])
        Q, R, Pt = np.diag([1.0, 0.1]), np.array([[0.05]]), np.diag([5.0, 1.0])
        N = 3
        cfg = MpcConfig(horizon=N, Q=Q, R=R)
        aug = AugmentedModel(A, B, A, B, np.zeros((2, 0)), [], nx=2)
        x0 = np.array([-2.0, 0.0])
        ref = np.zeros((N + 1, 2))
        xset = Polytope(np.vstack([np.eye(2), -np.eye(2)]), [10.0, 1.0, 10.0, 1.0])
        uset = Polytope([[1.0], [-1.0]], [0.8, 0.8])
        prob = condense(aug, cfg, [xset] * N, [uset] * N, x0, ref, Pt)
        sol = solve(prob.qp, tol_abs=1e-9, tol_rel=1e-9)
        assert sol.status == SOLVED
        # sparse variables (x_1, x_2, x_3, u_0, u_1, u_2); dynamics as equality rows
        nz = 2 * N + N
        H = np.zeros((nz, nz))
        for k in range(N):
            H[2 * k:2 * k + 2, 2 * k:2 * k + 2] = 2 * (Pt if k == N - 1 else Q)
            H[2 * N + k, 2 * N + k] = 2 * R[0, 0]
        rows, lo, hi = [], [], []
        for k in range(N):
            row = np.zeros((2, nz))
            row[:, 2 * k:2 * k + 2] = np.eye(2)
            if k:
                row[:, 2 * (k - 1):2 * k] = -A
            row[:, 2 * N + k] = -B[:, 0]
            rhs = A @ x0 if k == 0 else np.zeros(2)
            rows.append(row)
            lo.append(rhs)
            hi.append(rhs)
            sel = np.zeros((2, nz))
            sel[:, 2 * k:2 * k + 2] = np.eye(2)
            rows.append(sel)
            lo.append(-xset.h[2:])
            hi.append(xset.h[:2])
            sel = np.zeros((1, nz))
            sel[0, 2 * N + k] = 1.0
            rows.append(sel)
            lo.append([-0.8])
            hi.append([0.8])
        sparse = QpProblem(H, np.zeros(nz), np.vstack(rows), np.concatenate(lo), np.concatenate(hi))
        x_ref, _ = active_set_oracle(sparse)
        np.testing.assert_allclose(sol.x, x_ref[2 * N:], atol=1e-6)
        assert np.any(np.isclose(np.abs(x_ref[1:2 * N:2]), 1.0))   # a velocity bound is active

    def test_cost_equals_simulated_cost(self, controller, gps, rng):
        c = controller
        cfg = c.config
        beliefs = [GpBelief(rng.normal(size=6) * 0.1, np.eye(6) * 1e-3) for _ in gps]
        x0 = rng.normal(size=NX) * 0.3
        ref = rng.normal(size=(26, NX))
        res = c.solve_gp(x0, ref, gps, beliefs)
        aug = c.augmented(gps)
        U = res.inputs
        x = np.concatenate([x0, np.concatenate([b.mean for b in beliefs])])
        total = (x0 - ref[0]) @ cfg.Q @ (x0 - ref[0])
        for k in range(cfg.horizon):
            total += U[k] @ cfg.R @ U[k]
            x = aug.Ad @ x + aug.Bd @ U[k]
            e = x[:NX] - ref[k + 1]
            total += e @ (c.P if k == cfg.horizon - 1 else cfg.Q) @ e
        assert res.problem.cost(U.ravel()) == pytest.approx(total, rel=1e-8)
        np.testing.assert_allclose(res.problem.predict(U.ravel()),
                                   _rollout(aug, x, U, x0, beliefs), rtol=1e-10, atol=1e-12)

    def test_same_hessian_in_both_modes(self, controller, gps, rng):
        c = controller
        beliefs = [GpBelief(rng.normal(size=6) * 0.1, np.eye(6) * 1e-3) for _ in gps]
        a = c.solve_nominal(np.zeros(NX), np.zeros((26, NX)))
        b = c.solve_gp(np.zeros(NX), np.zeros((26, NX)), gps, beliefs)
        np.testing.assert_array_equal(a.problem.qp.P, b.problem.qp.P)
        np.testing.assert_array_equal(a.problem.qp.A, b.problem.qp.A)
        assert a.problem.qp.P.shape == (100, 100)


def _rollout(aug, _, U, x0, beliefs):
    x = np.concatenate([x0, np.concatenate([b.mean for b in beliefs])])
    out = []
    for u in U:
        x = aug.Ad @ x + aug.Bd @ u
        out.append(x[:NX])
    return np.array(out)


def test_nominal_recovery(gps):
    cfg = MpcConfig(u_hover=PARAMS.hover_thrust)
    nominal = MpcController(PARAMS, cfg)
    learned = MpcController(PARAMS, cfg)
    rng = np.random.default_rng(11)
    zero = [GpBelief(np.zeros(6), np.zeros((6, 6))) for _ in gps]
    worst = 0.0
    for _ in range(10):
        x0 = np.concatenate([rng.uniform(-2, 2, 3), rng.uniform(-1, 1, 3),
                             rng.uniform(-0.2, 0.2, 3), rng.uniform(-0.3, 0.3, 3)])
        ref = np.tile(np.array([1.0, -1.0, 0.5] + [0.0] * 9), (26, 1))
        nominal.reset()
        learned.reset()
        a = nominal.solve_nominal(x0, ref)
        b = learned.solve_gp(x0, ref, gps, zero, dist_var=np.zeros((3, 25)))
        assert a.solution.status == b.solution.status == SOLVED
        worst = max(worst, float(np.max(np.abs(a.inputs - b.inputs))))
    assert worst < 1e-6


class TestSoftening:
    def test_infeasible_start_is_softened(self, controller):
        c = controller
        c.reset()
        x0 = np.zeros(NX)
        x0[3] = 12.0                      # beyond the 10 m/s velocity bound
        res = c.solve_nominal(x0, np.zeros((26, NX)))
        assert res.softened
        assert res.solution.status == SOLVED
        ok, report = verify_kkt(c.last_soft_problem, res.solution, 1e-5)
        assert ok, report
        n_u = 100
        slack = res.solution.x[n_u:]
        assert np.all(slack >= -1e-6) and slack.max() > 0
        # inputs stay hard
        assert np.all(np.abs(res.inputs[:, 1:]) <= 1 + 1e-6)
        assert np.all(res.inputs[:, 0] >= -c.config.u_hover - 1e-6)
        # exact-penalty weight on every slack, slacks bounded below only
        qp = c.last_soft_problem
        np.testing.assert_array_equal(qp.q[n_u:], SOFT_LINEAR)
        assert np.all(qp.u[-24:] >= INF)

    def test_feasible_problem_not_softened(self, controller):
        controller.reset()
        res = controller.solve_nominal(np.zeros(NX), np.zeros((26, NX)))
        assert not res.softened
