"""Stochastic MPC with GP disturbance prediction.

The quadcopter hover model is augmented with the three per-axis disturbance
GPs, the state covariance is propagated under an LQR ancillary gain, state
and input boxes are tightened with Gaussian quantiles, and the horizon is
condensed into a QP over the input deviations from trim.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .dynamics import NU, NX, QuadParams, discretize_exact, linearize_hover
from .qpsolve import MAX_ITER, PRIMAL_INFEASIBLE, SOLVED, QpProblem, QpSolution, QpSolver
from .ssgp import GpBelief, GpModel, predict_horizon

VELOCITY_ROWS = (3, 4, 5)
SOFT_LINEAR = 1e6
SOFT_QUADRATIC = 1e5
# largest relaxed-constraint violation accepted from an unconverged slack solve
SOFT_PRIMAL_TOL = 1e-3


@dataclass
class Polytope:
    """Half-space set ``{z : H z <= h}``."""

    H: np.ndarray
    h: np.ndarray
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.h = np.asarray(self.h, dtype=float).reshape(self.H.shape[0])
        if np.any(np.all(self.H == 0, axis=1)):
            raise ValueError("polytope has an all-zero row")
        if not np.all(np.isfinite(self.h)):
            raise ValueError("polytope offsets must be finite")

    def contains(self, z, tol=0.0) -> bool:
        return bool(np.all(self.H @ np.asarray(z) <= self.h + tol))

    @classmethod
    def box(cls, upper, lower=None, names=None) -> "Polytope":
        """``-lower <= z <= upper`` written as ``[I; -I] z <= [upper; lower]``."""
        upper = np.asarray(upper, dtype=float)
        lower = upper if lower is None else np.asarray(lower, dtype=float)
        n = upper.size
        names = names or [f"z{i}" for i in range(n)]
        labels = [f"{s}<=" for s in names] + [f"-{s}<=" for s in names]
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([upper, lower]), labels)


def default_state_bounds() -> np.ndarray:
    h_x1 = [15.0, 15.0, 6.0, 10.0, 10.0, 10.0]
    h_x2 = [math.pi / 3, math.pi / 3, math.pi / 5, 2 * math.pi, 2 * math.pi, 2 * math.pi]
    return np.array(h_x1 + h_x2)


STATE_NAMES = ["x", "y", "z", "vx", "vy", "vz", "roll", "pitch", "yaw",
               "droll", "dpitch", "dyaw"]
INPUT_NAMES = ["thrust", "tau_x", "tau_y", "tau_z"]


@dataclass
class MpcConfig:
    horizon: int = 25
    Q: np.ndarray = field(default_factory=lambda: np.diag([6.0] * 6 + [1.0] * 6))
    R: np.ndarray = field(default_factory=lambda: 1e3 * np.diag([5.0, 40.0, 40.0, 40.0]))
    state_bounds: np.ndarray = field(default_factory=default_state_bounds)
    u_hover: float = 0.0
    p_x: float = 0.95
    p_u: float = 0.95
    dt: float = 0.1

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if np.min(np.linalg.eigvalsh(self.Q)) < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(self.R)) <= 0:
            raise ValueError("R must be positive definite")
        if not (0 <= self.p_x < 1 and 0 <= self.p_u < 1):
            raise ValueError("probability levels must lie in [0, 1)")

    def state_set(self) -> Polytope:
        return Polytope.box(self.state_bounds, names=STATE_NAMES)

    def input_set(self) -> Polytope:
        """Deviation-from-trim input box; thrust in ``[-u_hover, 1 - u_hover]``."""
        upper = np.array([1.0 - self.u_hover, 1.0, 1.0, 1.0])
        lower = np.array([self.u_hover, 1.0, 1.0, 1.0])
        return Polytope.box(upper, lower, names=INPUT_NAMES)


@dataclass
class AugmentedModel:
    Ad: np.ndarray
    Bd: np.ndarray
    A_cont: np.ndarray
    B_cont: np.ndarray
    C: np.ndarray
    gps: list
    nx: int = NX

    @property
    def n(self) -> int:
        return self.Ad.shape[0]

    def gp_slices(self):
        out, start = [], self.nx
        for gp in self.gps:
            out.append(slice(start, start + gp.nz))
            start += gp.nz
        return out


def disturbance_columns(nx=NX) -> np.ndarray:
    C = np.zeros((nx, 3))
    for i, row in enumerate(VELOCITY_ROWS):
        C[row, i] = 1.0
    return C


def build_augmented(A, B, gps, dt: float) -> AugmentedModel:
    """Joint exact discretization of the quad model driven by GP outputs."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    nx, nu = B.shape
    if A.shape != (nx, nx):
        raise ValueError("A and B dimensions disagree")
    gps = list(gps)
    for gp in gps:
        if gp.dt is not None and abs(gp.dt - dt) > 1e-12:
            raise ValueError(f"GP sampled at {gp.dt}, predictor at {dt}")
    C = disturbance_columns(nx)
    if len(gps) not in (0, 3):
        raise ValueError("expected zero or three disturbance GPs")
    n = nx + sum(gp.nz for gp in gps)
    Ac = np.zeros((n, n))
    Ac[:nx, :nx] = A
    start = nx
    for i, gp in enumerate(gps):
        sl = slice(start, start + gp.nz)
        Ac[:nx, sl] = np.outer(C[:, i], gp.H[0])
        Ac[sl, sl] = gp.F
        start += gp.nz
    Bc = np.zeros((n, nu))
    Bc[:nx] = B
    disc = discretize_exact(Ac, Bc, dt)
    return AugmentedModel(disc.Ad, disc.Bd, Ac, Bc, C, gps, nx)


def dlqr(Ad, Bd, Q, R, tol=1e-9, max_iter=10_000):
    """Infinite-horizon discrete LQR by Riccati iteration; returns ``(K, P)``.

    Iterates until the Riccati map moves ``P`` by less than ``tol`` relative
    to ``max(1, |P|)``, then takes one Newton-Kleinman step to clean up the
    residual.
    """
    A, B = np.atleast_2d(Ad), np.atleast_2d(Bd)
    Q, R = np.atleast_2d(Q), np.atleast_2d(R)
    P = Q.copy()
    for _ in range(max_iter):
        P_next = _riccati_map(P, A, B, Q, R)
        step = np.max(np.abs(P_next - P))
        P = P_next
        if step <= tol * max(1.0, np.max(np.abs(P))):
            break
    else:
        raise RuntimeError(f"Riccati iteration did not converge in {max_iter} steps")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    # Newton refinement: solve the closed-loop Lyapunov equation for P
    Acl = A - B @ K
    from scipy.linalg import solve_discrete_lyapunov
    P_ref = solve_discrete_lyapunov(Acl.T, Q + K.T @ R @ K)
    P_ref = 0.5 * (P_ref + P_ref.T)
    if dare_residual(P_ref, A, B, Q, R) < dare_residual(P, A, B, Q, R):
        P = P_ref
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return K, P


def _riccati_map(P, A, B, Q, R):
    BtPA = B.T @ P @ A
    P_next = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
    return 0.5 * (P_next + P_next.T)


def dare_residual(P, A, B, Q, R) -> float:
    return float(np.max(np.abs(P - _riccati_map(P, A, B, Q, R))))


@dataclass
class UncertaintyTube:
    state_cov: np.ndarray   # (N+1, nx, nx)
    input_cov: np.ndarray   # (N, nu, nu)


def propagate_uncertainty(dist_var, K, Ad, Bd, C, n_steps: int) -> UncertaintyTube:
    """State/input covariances along the horizon under ancillary feedback.

    ``dist_var`` has shape ``(n_dist, n_steps)``: the output variance of each
    disturbance GP at each step; ``C`` maps disturbance ``i`` into the state.
    """
    Ad, Bd, K = np.atleast_2d(Ad), np.atleast_2d(Bd), np.atleast_2d(K)
    C = np.asarray(C, dtype=float).reshape(Ad.shape[0], -1)
    dist_var = np.asarray(dist_var, dtype=float).reshape(C.shape[1], n_steps)
    nx, nu = Ad.shape[0], Bd.shape[1]
    Acl = Ad - Bd @ K
    Sx = np.zeros((n_steps + 1, nx, nx))
    Su = np.zeros((n_steps, nu, nu))
    for k in range(n_steps):
        Su[k] = K @ Sx[k] @ K.T
        S = Acl @ Sx[k] @ Acl.T + (C * dist_var[:, k]) @ C.T
        Sx[k + 1] = 0.5 * (S + S.T)
    return UncertaintyTube(Sx, Su)


def quantile(p):
    """Standard-normal quantile function."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("probability must lie strictly between 0 and 1")
    out = ndtri(p)
    return float(out) if out.ndim == 0 else out


def tightening_level(p_level: float, n_dims: int) -> float:
    """``1 - (1/n - (p + 1)/(2n))``; equals 1 (infinite margin) at ``p = 1``."""
    return 1.0 - (1.0 / n_dims - (p_level + 1.0) / (2.0 * n_dims))


def tighten(poly: Polytope, cov, p_level: float, n_dims: int) -> Polytope:
    """Shrink each half-space by ``|H| quantile(p_bar) sqrt(diag(cov))``."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    std = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if not np.any(std > 0):
        return Polytope(poly.H.copy(), poly.h.copy(), list(poly.labels))
    z = quantile(tightening_level(p_level, n_dims))
    return Polytope(poly.H.copy(), poly.h - np.abs(poly.H) @ std * z, list(poly.labels))


def tighten_sequence(poly: Polytope, covs, p_level: float, n_dims: int) -> list:
    """:func:`tighten` applied to a stack of covariances ``(K, n, n)``."""
    covs = np.asarray(covs, dtype=float)
    std = np.sqrt(np.clip(np.diagonal(covs, axis1=1, axis2=2), 0.0, None))
    z = quantile(tightening_level(p_level, n_dims))
    offsets = poly.h - z * std @ np.abs(poly.H).T
    out = []
    for k in range(len(covs)):
        tight = copy.copy(poly)
        tight.h = offsets[k] if np.any(std[k] > 0) else poly.h.copy()
        out.append(tight)
    return out


def prediction_matrix(Ad, Bd, nx: int, horizon: int) -> np.ndarray:
    """Map from the stacked inputs to the stacked quad states ``x_1..x_N``."""
    n, nu = Bd.shape
    blocks = []
    M = Bd.copy()
    for _ in range(horizon):
        blocks.append(M[:nx].copy())
        M = Ad @ M
    G = np.zeros((horizon * nx, horizon * nu))
    for k in range(horizon):
        for j in range(k + 1):
            G[k * nx:(k + 1) * nx, j * nu:(j + 1) * nu] = blocks[k - j]
    return G


def free_response(Ad, x0, nx: int, horizon: int) -> np.ndarray:
    out = np.empty((horizon, nx))
    x = np.asarray(x0, dtype=float)
    for k in range(horizon):
        x = Ad @ x
        out[k] = x[:nx]
    return out


@dataclass
class MpcProblem:
    """Condensed QP over ``U = (u_0, ..., u_{N-1})`` (deviations from trim)."""

    qp: QpProblem
    const: float
    free: np.ndarray
    gamma: np.ndarray
    horizon: int
    nx: int
    nu: int
    state_rows: int

    def predict(self, U) -> np.ndarray:
        """Quad states ``x_1..x_N`` for the stacked input ``U``."""
        return self.free + (self.gamma @ np.asarray(U)).reshape(self.horizon, self.nx)

    def cost(self, U) -> float:
        U = np.asarray(U, dtype=float)
        return float(0.5 * U @ self.qp.P @ U + self.qp.q @ U + self.const)


def cost_weights(config: MpcConfig, terminal_weight, nx: int = NX) -> np.ndarray:
    """Block-diagonal stage weights for ``x_1..x_N`` with the terminal block last."""
    N = config.horizon
    Qbar = np.zeros((N * nx, N * nx))
    for k in range(N - 1):
        Qbar[k * nx:(k + 1) * nx, k * nx:(k + 1) * nx] = config.Q
    Qbar[(N - 1) * nx:, (N - 1) * nx:] = terminal_weight
    return Qbar


def condense(aug: AugmentedModel, config: MpcConfig, state_sets, input_sets, x0_aug,
             reference, terminal_weight, gamma=None, structure=None) -> MpcProblem:
    """Eliminate the states and return the QP in ``l <= A U <= u`` form.

    ``state_sets[k]`` constrains ``x_{k+1}``; ``input_sets[k]`` constrains
    ``u_k``; ``reference`` holds ``r_0..r_N`` for the quad state. A
    ``structure = (Qbar, P, A)`` from an earlier call with the same weights
    and half-space normals skips rebuilding the step-invariant parts.
    """
    N, nx, nu = config.horizon, aug.nx, aug.Bd.shape[1]
    reference = np.asarray(reference, dtype=float).reshape(N + 1, nx)
    x0_aug = np.asarray(x0_aug, dtype=float)
    if x0_aug.shape != (aug.n,):
        raise ValueError(f"initial state has shape {x0_aug.shape}, model needs ({aug.n},)")
    if len(state_sets) != N or len(input_sets) != N:
        raise ValueError("need one state and one input set per horizon step")
    if gamma is None:
        gamma = prediction_matrix(aug.Ad, aug.Bd, nx, N)
    free = free_response(aug.Ad, x0_aug, nx, N)

    if structure is None:
        Qbar = cost_weights(config, terminal_weight, nx)
        P = 2.0 * (gamma.T @ Qbar @ gamma + np.kron(np.eye(N), config.R))
        P = 0.5 * (P + P.T)
    else:
        Qbar, P, A = structure
    err = (free - reference[1:]).ravel()
    Qerr = Qbar @ err
    q = 2.0 * gamma.T @ Qerr
    e0 = x0_aug[:nx] - reference[0]
    const = float(err @ Qerr + e0 @ config.Q @ e0)

    rows_A, rows_u = [], []
    for k, poly in enumerate(state_sets):
        if structure is None:
            rows_A.append(poly.H @ gamma[k * nx:(k + 1) * nx])
        rows_u.append(poly.h - poly.H @ free[k])
    state_rows = sum(len(r) for r in rows_u)
    for k, poly in enumerate(input_sets):
        if structure is None:
            block = np.zeros((poly.H.shape[0], N * nu))
            block[:, k * nu:(k + 1) * nu] = poly.H
            rows_A.append(block)
        rows_u.append(poly.h)
    if structure is None:
        A = np.vstack(rows_A)
    u = np.concatenate(rows_u)
    qp = QpProblem(P, q, A, np.full(u.size, -np.inf), u)
    return MpcProblem(qp, const, free, gamma, N, nx, nu, state_rows)


@dataclass
class MpcResult:
    inputs: np.ndarray          # (N, nu) deviations from trim
    solution: QpSolution
    problem: MpcProblem
    mode: str
    softened: bool
    solve_time: float
    total_time: float
    tube: UncertaintyTube | None = None
    min_margin: float = float("nan")

    @property
    def first(self) -> np.ndarray:
        return self.inputs[0]

    @property
    def usable(self) -> bool:
        """Whether the first input may be applied.

        A softened problem is always feasible, so a max-iter iterate that
        satisfies the relaxed constraints is still a valid (suboptimal) control.
        """
        sol = self.solution
        if not np.all(np.isfinite(sol.x)):
            return False
        if sol.status == SOLVED:
            return True
        return self.softened and sol.status == MAX_ITER and sol.prim_res <= SOFT_PRIMAL_TOL


class MpcController:
    """Nominal and GP-augmented MPC sharing one condensed QP structure.

    GP states do not influence the map from inputs to quad states, so the QP
    Hessian and constraint matrix are the same in both modes; only the linear
    cost term and the bounds change between steps.
    """

    def __init__(self, params: QuadParams, config: MpcConfig, solver_opts=None):
        self.params = params
        self.config = config
        self.linear = linearize_hover(params)
        disc = discretize_exact(self.linear.A, self.linear.B, config.dt)
        self.Ad, self.Bd = disc.Ad, disc.Bd
        self.K, self.P = dlqr(self.Ad, self.Bd, config.Q, config.R)
        self.C_dist = discretize_exact(self.linear.A, disturbance_columns(), config.dt).Bd
        self.nominal = AugmentedModel(self.Ad, self.Bd, self.linear.A, self.linear.B,
                                      disturbance_columns(), [])
        self.gamma = prediction_matrix(self.Ad, self.Bd, NX, config.horizon)
        self.state_set = config.state_set()
        self.input_set = config.input_set()
        self.solver_opts = dict(tol_abs=1e-5, tol_rel=1e-5, max_iter=4000)
        self.solver_opts.update(solver_opts or {})
        self._solver = None
        self._soft_solver = None
        self._aug_cache = (None, None)
        self._cached_structure = None
        self._warm = None

    def augmented(self, gps) -> AugmentedModel:
        key = tuple(gp.hyper for gp in gps)
        if self._aug_cache[0] != key:
            aug = build_augmented(self.linear.A, self.linear.B, gps, self.config.dt)
            self._aug_cache = (key, aug)
        return self._aug_cache[1]

    def reset(self):
        self._warm = None

    def solve_nominal(self, x0, reference) -> MpcResult:
        t0 = time.perf_counter()
        N = self.config.horizon
        prob = condense(self.nominal, self.config, [self.state_set] * N, [self.input_set] * N,
                        np.asarray(x0, dtype=float), reference, self.P, gamma=self.gamma,
                        structure=self._structure())
        return self._solve(prob, "nominal", t0)

    def solve_gp(self, x0, reference, gps, beliefs, dist_var=None) -> MpcResult:
        """GP-MPC step; ``beliefs`` are the GP state estimates for the first interval."""
        t0 = time.perf_counter()
        cfg = self.config
        N = cfg.horizon
        aug = self.augmented(gps)
        z0 = np.concatenate([b.mean for b in beliefs])
        x0_aug = np.concatenate([np.asarray(x0, dtype=float), z0])
        if dist_var is None:
            dist_var = np.empty((3, N))
            for i, (gp, b) in enumerate(zip(gps, beliefs)):
                # the belief already describes step 0; variances for steps 0..N-1
                _, var = predict_horizon(b, gp, N)
                dist_var[i, 0] = b.cov[0, 0] + gp.noise_var
                dist_var[i, 1:] = var[:-1]
        tube = propagate_uncertainty(dist_var, self.K, self.Ad, self.Bd, self.C_dist, N)
        x_sets = tighten_sequence(self.state_set, tube.state_cov[1:], cfg.p_x, NX)
        u_sets = tighten_sequence(self.input_set, tube.input_cov, cfg.p_u, NU)
        prob = condense(aug, cfg, x_sets, u_sets, x0_aug, reference, self.P, gamma=self.gamma,
                        structure=self._structure())
        result = self._solve(prob, "gp", t0)
        result.tube = tube
        result.min_margin = float(min(np.min(s.h) for s in x_sets))
        return result

    def _structure(self):
        """Weights, Hessian and constraint matrix shared by every step."""
        if self._cached_structure is None:
            N = self.config.horizon
            prob = condense(self.nominal, self.config, [self.state_set] * N,
                            [self.input_set] * N, np.zeros(NX), np.zeros((N + 1, NX)), self.P,
                            gamma=self.gamma)
            self._cached_structure = (cost_weights(self.config, self.P), prob.qp.P, prob.qp.A)
        return self._cached_structure

    def _qp_solver(self, prob: MpcProblem) -> QpSolver:
        if self._solver is None:
            self._solver = QpSolver(prob.qp.P, prob.qp.A)
        return self._solver

    def _solve(self, prob: MpcProblem, mode: str, t0: float) -> MpcResult:
        t_solve = time.perf_counter()
        solver = self._qp_solver(prob)
        sol = solver.solve(prob.qp.q, prob.qp.l, prob.qp.u, warm_start=self._warm,
                           **self.solver_opts)
        softened = False
        if sol.status in (PRIMAL_INFEASIBLE, MAX_ITER):
            sol = self._solve_soft(prob)
            softened = True
        solve_time = time.perf_counter() - t_solve
        U = sol.x[: prob.horizon * prob.nu]
        self._warm = (sol.x, sol.y) if not softened else None
        return MpcResult(U.reshape(prob.horizon, prob.nu), sol, prob, mode, softened,
                         solve_time, time.perf_counter() - t0)

    def _solve_soft(self, prob: MpcProblem) -> QpSolution:
        """Penalized relaxation: one non-negative slack per state half-space.

        The slack cost is ``SOFT_LINEAR * s + SOFT_QUADRATIC * s**2``; the
        quadratic part keeps the ADMM iteration well conditioned.
        """
        n_u = prob.horizon * prob.nu
        n_rows_poly = self.state_set.H.shape[0]
        n_s = n_rows_poly
        qp = prob.qp
        S = np.zeros((qp.m, n_s))
        for k in range(prob.horizon):
            S[k * n_rows_poly:(k + 1) * n_rows_poly] = -np.eye(n_rows_poly)
        A = np.block([[qp.A, S], [np.zeros((n_s, n_u)), np.eye(n_s)]])
        P = np.zeros((n_u + n_s, n_u + n_s))
        P[:n_u, :n_u] = qp.P
        P[n_u:, n_u:] = 2.0 * SOFT_QUADRATIC * np.eye(n_s)
        q = np.concatenate([qp.q, np.full(n_s, SOFT_LINEAR)])
        l = np.concatenate([qp.l, np.zeros(n_s)])
        u = np.concatenate([qp.u, np.full(n_s, np.inf)])
        if self._soft_solver is None:
            self._soft_solver = QpSolver(P, A, q_hint=q)
        opts = dict(self.solver_opts)
        opts["max_iter"] = max(opts.get("max_iter", 4000), 20000)
        sol = self._soft_solver.solve(q, l, u, **opts)
        if sol.status != SOLVED:
            # rho and cost scaling carried over from an earlier slack problem can stall
            self._soft_solver = QpSolver(P, A, q_hint=q)
            sol = self._soft_solver.solve(q, l, u, **opts)
        self.last_soft_problem = QpProblem(P, q, A, l, u)
        return sol
