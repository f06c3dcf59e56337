"""Dense operator-splitting (ADMM) solver for convex QPs.

Solves::

    minimize    1/2 x' P x + q' x
    subject to  l <= A x <= u

with the OSQP iteration: Ruiz-equilibrated data, over-relaxed ADMM steps on
a cached dense factorization of ``P + sigma I + A' diag(rho) A``, primal
infeasibility detection, and an active-set polish of the final iterate.
Dual sign convention: ``y_i > 0`` for an active upper bound, ``y_i < 0`` for
an active lower bound, so that ``P x + q + A' y = 0`` at the optimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

INF = 1e20
SOLVED = "solved"
MAX_ITER = "max-iter"
PRIMAL_INFEASIBLE = "primal-infeasible"

RHO_MIN = 1e-6
RHO_EQ_SCALE = 1e3
MIN_SCALING = 1e-4
MAX_SCALING = 1e4
# residual ratios need a few dozen iterations to settle after a rho change
ADAPT_INTERVAL = 25


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        n = self.P.shape[0]
        self.q = np.asarray(self.q, dtype=float).reshape(n)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        m = self.A.shape[0]
        self.l = np.asarray(self.l, dtype=float).reshape(m)
        self.u = np.asarray(self.u, dtype=float).reshape(m)
        if np.any(self.l > self.u):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    prim_res: float
    dual_res: float
    polished: bool = False
    info: dict = field(default_factory=dict)


def _inf_norm(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _ruiz(P, A, n_iter=15, q=None):
    """Modified Ruiz equilibration of the KKT matrix plus a cost scaling.

    When a representative ``q`` is given it enters the cost scaling as well.
    """
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Ps, As = P.copy(), A.copy()
    for _ in range(n_iter):
        col = np.maximum(np.abs(Ps).max(axis=0), np.abs(As).max(axis=0) if m else 0.0)
        d = 1.0 / np.sqrt(np.clip(col, MIN_SCALING, MAX_SCALING))
        if m:
            e = 1.0 / np.sqrt(np.clip(np.abs(As).max(axis=1), MIN_SCALING, MAX_SCALING))
        else:
            e = np.ones(0)
        Ps = d[:, None] * Ps * d[None, :]
        As = e[:, None] * As * d[None, :]
        D *= d
        E *= e
    cost_size = np.mean(np.abs(Ps).max(axis=0)) if n else 1.0
    if q is not None:
        cost_size = max(cost_size, _inf_norm(D * np.asarray(q, dtype=float)))
    c = 1.0 / np.clip(cost_size, MIN_SCALING, MAX_SCALING)
    return D, E, c


class QpSolver:
    """ADMM solver bound to fixed ``P`` and ``A``.

    Only ``q``, ``l`` and ``u`` may change between :meth:`solve` calls, so
    the scaling and the factorization are computed once in the constructor.
    """

    def __init__(self, P, A, rho=0.1, sigma=1e-6, alpha=1.6, scaling_iter=15,
                 adaptive_rho=True, q_hint=None, equality_mask=None, infinite_mask=None):
        self.P = np.atleast_2d(np.asarray(P, dtype=float))
        n = self.P.shape[0]
        self.A = np.asarray(A, dtype=float).reshape(-1, n)
        self.n, self.m = n, self.A.shape[0]
        self.sigma, self.alpha = sigma, alpha
        self.rho = rho
        self.adaptive_rho = adaptive_rho
        self.n_factorizations = 0
        if scaling_iter > 0:
            self.D, self.E, self.c = _ruiz(self.P, self.A, scaling_iter, q_hint)
        else:
            self.D, self.E, self.c = np.ones(n), np.ones(self.m), 1.0
        self.Ps = self.c * self.D[:, None] * self.P * self.D[None, :]
        self.As = self.E[:, None] * self.A * self.D[None, :]
        self._equality = np.zeros(self.m, bool) if equality_mask is None else np.asarray(equality_mask)
        self._infinite = np.zeros(self.m, bool) if infinite_mask is None else np.asarray(infinite_mask)
        self._factor()

    def _factor(self):
        rho_vec = np.full(self.m, self.rho)
        rho_vec[self._equality] = self.rho * RHO_EQ_SCALE
        rho_vec[self._infinite] = RHO_MIN
        self.rho_vec = rho_vec
        K = self.Ps + self.sigma * np.eye(self.n) + self.As.T @ (rho_vec[:, None] * self.As)
        self._chol = cho_factor(K)
        self.n_factorizations += 1

    def _update_rho_masks(self, l, u):
        eq = np.abs(u - l) < 1e-10
        inf = (l <= -INF) & (u >= INF)
        if not (np.array_equal(eq, self._equality) and np.array_equal(inf, self._infinite)):
            self._equality, self._infinite = eq, inf
            self._factor()

    def solve(self, q, l, u, warm_start=None, tol_abs=1e-5, tol_rel=1e-5, max_iter=4000,
              tol_infeas=1e-6, check_every=5, polish=True, polish_retries=2) -> QpSolution:
        """ADMM solve with warm start; a failed polish is retried after tightening
        the tolerances tenfold and continuing from the current iterate."""
        q = np.asarray(q, dtype=float)
        l = np.clip(np.asarray(l, dtype=float), -INF, INF)
        u = np.clip(np.asarray(u, dtype=float), -INF, INF)
        if np.any(l > u):
            raise ValueError("lower bound exceeds upper bound")
        self._update_rho_masks(l, u)
        D, E, c = self.D, self.E, self.c
        qs = c * D * q
        ls = np.where(l <= -INF, -INF, E * l)
        us = np.where(u >= INF, INF, E * u)
        Ps, As, sigma, alpha = self.Ps, self.As, self.sigma, self.alpha

        if warm_start is not None:
            x = np.asarray(warm_start[0], dtype=float) / D
            y = c * np.asarray(warm_start[1], dtype=float) / E if self.m else np.zeros(0)
        else:
            x = np.zeros(self.n)
            y = np.zeros(self.m)
        z = np.clip(As @ x, ls, us)

        status = MAX_ITER
        prim_res = dual_res = np.inf
        it = 0
        for it in range(1, max_iter + 1):
            rho = self.rho_vec
            rhs = sigma * x - qs + As.T @ (rho * z - y)
            x_t = cho_solve(self._chol, rhs)
            z_t = As @ x_t
            x_new = alpha * x_t + (1.0 - alpha) * x
            z_relax = alpha * z_t + (1.0 - alpha) * z
            z_new = np.clip(z_relax + y / rho, ls, us)
            y_new = y + rho * (z_relax - z_new)
            delta_y = y_new - y
            x, z, y = x_new, z_new, y_new

            if it % check_every and it != max_iter:
                continue
            xu, yu, zu = D * x, E * y / c, z / E if self.m else z
            Ax = self.A @ xu
            Px = self.P @ xu
            Aty = self.A.T @ yu
            prim_res = _inf_norm(Ax - zu)
            dual_res = _inf_norm(Px + q + Aty)
            eps_p = tol_abs + tol_rel * max(_inf_norm(Ax), _inf_norm(zu))
            eps_d = tol_abs + tol_rel * max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(q))
            if prim_res <= eps_p and dual_res <= eps_d:
                status = SOLVED
                break
            if self.m and self._primal_infeasible(E * delta_y / c, l, u, tol_infeas):
                status = PRIMAL_INFEASIBLE
                break
            if self.adaptive_rho and self.m and it % ADAPT_INTERVAL == 0:
                self._adapt_rho(x, y, z, qs)

        xu, yu = D * x, (E * y / c if self.m else y)
        sol = QpSolution(xu, yu, status, it, prim_res, dual_res)
        if status == SOLVED and polish:
            self._polish(sol, q, l, u, z / E if self.m else z)
            if not sol.polished and polish_retries > 0:
                retry = self.solve(q, l, u, warm_start=(sol.x, sol.y), tol_abs=tol_abs / 10,
                                   tol_rel=tol_rel / 10, max_iter=max_iter,
                                   tol_infeas=tol_infeas, check_every=check_every,
                                   polish=True, polish_retries=polish_retries - 1)
                retry.iterations += sol.iterations
                if retry.status == SOLVED:
                    return retry
        return sol

    def _adapt_rho(self, x, y, z, qs):
        """Balance scaled primal and dual residuals; refactor on large changes."""
        Ax = self.As @ x
        Px = self.Ps @ x
        Aty = self.As.T @ y
        prim = _inf_norm(Ax - z) / max(_inf_norm(Ax), _inf_norm(z), 1e-10)
        dual = _inf_norm(Px + qs + Aty) / max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(qs), 1e-10)
        new_rho = float(np.clip(self.rho * np.sqrt(prim / max(dual, 1e-10)), 1e-6, 1e6))
        if new_rho > 5.0 * self.rho or new_rho < 0.2 * self.rho:
            self.rho = new_rho
            self._factor()

    def _primal_infeasible(self, dy, l, u, tol) -> bool:
        norm = _inf_norm(dy)
        if norm < 1e-12:
            return False
        if _inf_norm(self.A.T @ dy) > tol * norm:
            return False
        pos, neg = dy > tol * norm, dy < -tol * norm
        if np.any(pos & (u >= INF)) or np.any(neg & (l <= -INF)):
            return False
        support = np.sum(u[pos] * dy[pos]) + np.sum(l[neg] * dy[neg])
        return support < -tol * norm

    def _polish(self, sol: QpSolution, q, l, u, z):
        """Solve the equality-constrained KKT system on the guessed active set."""
        y = sol.y
        lower = (z - l < -y) & (l > -INF)
        upper = (u - z < y) & (u < INF)
        active = lower | upper
        A_act = self.A[active]
        b_act = np.where(lower[active], l[active], u[active])
        n, k = self.n, int(active.sum())
        delta = 1e-9
        K = np.zeros((n + k, n + k))
        K[:n, :n] = self.P
        K[:n, n:] = A_act.T
        K[n:, :n] = A_act
        K_reg = K.copy()
        K_reg[:n, :n] += delta * np.eye(n)
        K_reg[n:, n:] -= delta * np.eye(k)
        rhs = np.concatenate([-q, b_act])
        try:
            lu = np.linalg.inv(K_reg)
        except np.linalg.LinAlgError:
            return
        sol_vec = lu @ rhs
        for _ in range(5):
            sol_vec = sol_vec + lu @ (rhs - K @ sol_vec)
        x = sol_vec[:n]
        y_full = np.zeros(self.m)
        y_full[active] = sol_vec[n:]
        # dual signs must match the side each constraint is active on
        if np.any(y_full[upper & ~lower] < -1e-9) or np.any(y_full[lower & ~upper] > 1e-9):
            return
        Ax = self.A @ x
        prim = _inf_norm(np.maximum(Ax - u, 0) + np.maximum(l - Ax, 0)) if self.m else 0.0
        dual = _inf_norm(self.P @ x + q + self.A.T @ y_full)
        if prim <= max(sol.prim_res, 1e-9) and dual <= max(sol.dual_res, 1e-9):
            sol.x, sol.y = x, y_full
            sol.prim_res, sol.dual_res = prim, dual
            sol.polished = True


def solve(problem: QpProblem, tol_abs=1e-5, tol_rel=1e-5, max_iter=4000, rho=0.1,
          sigma=1e-6, alpha=1.6, warm_start=None, polish=True, adaptive_rho=True) -> QpSolution:
    solver = QpSolver(problem.P, problem.A, rho=rho, sigma=sigma, alpha=alpha,
                      adaptive_rho=adaptive_rho, q_hint=problem.q)
    return solver.solve(problem.q, problem.l, problem.u, warm_start=warm_start,
                        tol_abs=tol_abs, tol_rel=tol_rel, max_iter=max_iter, polish=polish)


def verify_kkt(problem: QpProblem, solution: QpSolution, tol: float = 1e-5):
    """Check stationarity, primal feasibility and complementary slackness.

    Returns ``(ok, report)`` where ``report`` holds the three residuals.
    """
    x, y = np.asarray(solution.x, dtype=float), np.asarray(solution.y, dtype=float)
    P, q, A, l, u = problem.P, problem.q, problem.A, problem.l, problem.u
    stationarity = _inf_norm(P @ x + q + A.T @ y)
    if problem.m:
        Ax = A @ x
        primal = _inf_norm(np.maximum(Ax - u, 0.0) + np.maximum(l - Ax, 0.0))
        y_up, y_lo = np.maximum(y, 0.0), np.maximum(-y, 0.0)
        with np.errstate(invalid="ignore"):
            gap_up = np.where(y_up > 0, y_up * np.abs(u - Ax), 0.0)
            gap_lo = np.where(y_lo > 0, y_lo * np.abs(Ax - l), 0.0)
        complementarity = _inf_norm(np.concatenate([gap_up, gap_lo]))
        if not np.isfinite(complementarity):
            complementarity = np.inf
    else:
        primal = complementarity = 0.0
    report = {"stationarity": stationarity, "primal": primal,
              "complementarity": complementarity}
    ok = all(v <= tol for v in report.values())
    return ok, report


def dump_problem(problem: QpProblem, path):
    """Write the problem as labelled whitespace-separated matrices."""
    with open(path, "w") as fh:
        for name in ("P", "q", "A", "l", "u"):
            arr = np.atleast_2d(getattr(problem, name))
            if name in ("q", "l", "u"):
                arr = arr.reshape(1, -1)
            fh.write(f"# {name} {arr.shape[0]} {arr.shape[1]}\n")
            np.savetxt(fh, arr, fmt="%.17g")


def load_problem(path) -> QpProblem:
    blocks = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines):
        _, name, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        data = [np.array(lines[i + 1 + r].split(), dtype=float) for r in range(rows)]
        blocks[name] = np.array(data).reshape(rows, cols) if rows else np.zeros((0, cols))
        i += 1 + rows
    return QpProblem(blocks["P"], blocks["q"].ravel(), blocks["A"],
                     blocks["l"].ravel(), blocks["u"].ravel())
