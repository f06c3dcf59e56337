"""Temporal Gaussian-process regression in state-space form.

The squared-exponential kernel ``k(tau) = s2 * exp(-tau**2 / l**2)`` has no
finite-order rational spectrum, so its inverse spectral density is replaced by
a truncated Taylor series in ``omega**2``. The stable spectral factor of the
resulting polynomial gives a companion-form LTI system whose output has
(approximately) the kernel as its covariance. Inference is then a scalar
Kalman filter and costs O(n) in the number of samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from numba import njit
from scipy.linalg import expm, solve_continuous_lyapunov

LOG_2PI = math.log(2.0 * math.pi)

# log-space box keeping online updates away from degenerate models
LOG_BOUNDS = np.array([[math.log(1e-6), math.log(1e4)],
                       [math.log(1e-2), math.log(1e3)],
                       [math.log(1e-8), math.log(1e4)]])


class GpConstructionError(ValueError):
    pass


class GpNumericalFault(FloatingPointError):
    """Non-finite likelihood or non-positive innovation variance."""

    def __init__(self, message, hyper=None):
        super().__init__(message if hyper is None else f"{message} (hyper: {hyper.to_text()!r})")
        self.hyper = hyper


@dataclass(frozen=True)
class Hyperparams:
    signal_var: float = 1.0
    length_scale: float = 1.0
    noise_var: float = 0.1

    def __post_init__(self):
        for name in ("signal_var", "length_scale", "noise_var"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")

    @property
    def log_vector(self) -> np.ndarray:
        return np.log([self.signal_var, self.length_scale, self.noise_var])

    @classmethod
    def from_log(cls, theta) -> "Hyperparams":
        s2, ell, n2 = np.exp(np.asarray(theta, dtype=float))
        return cls(float(s2), float(ell), float(n2))

    def to_text(self) -> str:
        return (f"signal_var = {self.signal_var!r}\n"
                f"length_scale = {self.length_scale!r}\n"
                f"noise_var = {self.noise_var!r}\n")

    @classmethod
    def from_text(cls, text: str) -> "Hyperparams":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = float(value)
        return cls(**values)


def se_kernel(tau, hyper: Hyperparams):
    tau = np.asarray(tau, dtype=float)
    return hyper.signal_var * np.exp(-(tau / hyper.length_scale) ** 2)


def se_spectral_density(omega, hyper: Hyperparams):
    """Fourier transform of the squared-exponential kernel (angular frequency)."""
    omega = np.asarray(omega, dtype=float)
    ell = hyper.length_scale
    return hyper.signal_var * ell * math.sqrt(math.pi) * np.exp(-(ell * omega) ** 2 / 4.0)


@lru_cache(maxsize=16)
def _unit_factor(order: int) -> tuple:
    """Monic stable denominator for unit length-scale, lowest degree first.

    ``1/S(omega)`` is proportional to ``sum_k (omega**2/4)**k / k!``; with
    ``s = i omega`` the polynomial in ``s`` has roots mirrored about the
    imaginary axis and the left-half-plane ones form the spectral factor.
    """
    if order < 1:
        raise GpConstructionError(f"approximation order must be >= 1, got {order}")
    # coefficients in s, highest degree first; omega**2 = -s**2
    poly = np.zeros(2 * order + 1)
    for k in range(order + 1):
        poly[2 * order - 2 * k] = (-1.0) ** k * 0.25 ** k / math.factorial(k)
    roots = np.roots(poly)
    stable = roots[roots.real < 0]
    if len(stable) != order:
        raise GpConstructionError(
            f"spectral factorization found {len(stable)} stable roots, expected {order}")
    d = np.real(np.poly(stable))[::-1]
    return tuple(d)


def stationary_covariance(F, L, q) -> np.ndarray:
    """Solve ``F P + P F^T + L q L^T = 0``."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    L = np.asarray(L, dtype=float).reshape(F.shape[0], -1)
    if np.max(np.linalg.eigvals(F).real) >= 0:
        raise GpConstructionError("F is not Hurwitz; no stationary covariance exists")
    Qc = np.atleast_2d(q) * np.eye(L.shape[1]) if np.ndim(q) == 0 else np.asarray(q)
    P = solve_continuous_lyapunov(F, -L @ Qc @ L.T)
    return 0.5 * (P + P.T)


@dataclass
class GpModel:
    """Continuous and discrete LTI realization of one scalar GP."""

    hyper: Hyperparams
    order: int
    F: np.ndarray
    L: np.ndarray
    H: np.ndarray
    q: float
    Pinf: np.ndarray
    dt: float | None = None
    Fd: np.ndarray | None = None
    Qd: np.ndarray | None = None

    @property
    def noise_var(self) -> float:
        return self.hyper.noise_var

    @property
    def nz(self) -> int:
        return self.order

    def kernel(self, tau):
        """Covariance implied by the realization, ``H exp(F|tau|) Pinf H^T``."""
        tau = np.atleast_1d(np.abs(np.asarray(tau, dtype=float)))
        out = np.array([(self.H @ expm(self.F * t) @ self.Pinf @ self.H.T).item() for t in tau])
        return out

    def prior(self) -> "GpBelief":
        return GpBelief(np.zeros(self.order), self.Pinf.copy())


@lru_cache(maxsize=16)
def _unit_realization(order: int):
    """Companion matrix for unit length-scale and its stationary covariance at ``q = 1``."""
    d = np.array(_unit_factor(order))[:order]
    F = np.zeros((order, order))
    F[:-1, 1:] = np.eye(order - 1)
    F[-1, :] = -d
    L = np.zeros((order, 1))
    L[-1, 0] = 1.0
    return F, L, stationary_covariance(F, L, 1.0)


def build_lti(hyper: Hyperparams, order: int = 6, dt: float | None = None) -> GpModel:
    """Companion-form realization of the Taylor-approximated SE spectrum.

    The length-scale enters as a time scaling, ``F = F_1 / l`` with ``F_1``
    the unit companion matrix. In these coordinates state ``k`` is
    ``l**k`` times the k-th derivative, which keeps the stationary covariance
    independent of ``l`` and well conditioned for short length-scales. The
    white-noise intensity ``q`` is set so that the stationary output variance
    equals ``signal_var`` exactly.
    """
    try:
        F1, L, P1 = _unit_realization(order)
    except GpConstructionError as exc:
        raise GpConstructionError(f"{exc} for {hyper}") from None
    ell = float(hyper.length_scale)
    F = F1 / ell
    H = np.zeros((1, order))
    H[0, 0] = 1.0
    if not np.all(np.isfinite(F)):
        raise GpConstructionError(f"non-finite spectral factor for {hyper}")
    scale = hyper.signal_var / P1[0, 0]
    # P1 solves F_1 P + P F_1^T = -L L^T; with F = F_1 / l the same P needs q = scale / l
    model = GpModel(hyper, order, F, L.copy(), H, float(scale / ell), scale * P1)
    if dt is not None:
        discretize_gp(model, dt)
    return model


def discretize_gp(model: GpModel, dt: float):
    """Set ``Fd = exp(F dt)`` and ``Qd = Pinf - Fd Pinf Fd^T``; returns ``(Fd, Qd)``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    Fd = expm(model.F * dt)
    Qd = model.Pinf - Fd @ model.Pinf @ Fd.T
    Qd = 0.5 * (Qd + Qd.T)
    model.dt, model.Fd, model.Qd = float(dt), Fd, Qd
    return Fd, Qd


@dataclass
class GpBelief:
    mean: np.ndarray
    cov: np.ndarray

    def copy(self) -> "GpBelief":
        return GpBelief(self.mean.copy(), self.cov.copy())


def _symmetrize(P):
    return 0.5 * (P + P.T)


def kalman_predict(belief: GpBelief, model: GpModel) -> GpBelief:
    Fd = model.Fd
    return GpBelief(Fd @ belief.mean, _symmetrize(Fd @ belief.cov @ Fd.T + model.Qd))


def kalman_correct(belief: GpBelief, y: float, model: GpModel):
    """Measurement update in Joseph form; returns ``(belief, loglik)``."""
    h = model.H[0]
    m, P = belief.mean, belief.cov
    Ph = P @ h
    S = h @ Ph + model.noise_var
    if not S > 0:
        raise GpNumericalFault(f"innovation variance {S} is not positive", model.hyper)
    v = y - h @ m
    k = Ph / S
    I_KH = np.eye(len(m)) - np.outer(k, h)
    P_new = I_KH @ P @ I_KH.T + model.noise_var * np.outer(k, k)
    loglik = -0.5 * (LOG_2PI + math.log(S) + v * v / S)
    return GpBelief(m + k * v, _symmetrize(P_new)), loglik


def kalman_update(belief: GpBelief, y: float, model: GpModel):
    """Predict one step, then correct with ``y``; returns ``(belief, loglik)``."""
    return kalman_correct(kalman_predict(belief, model), y, model)


def filter_batch(y, model: GpModel, belief: GpBelief | None = None):
    """Run the filter over ``y`` from the stationary prior; returns ``(belief, loglik)``."""
    belief = model.prior() if belief is None else belief
    m, P, loglik, bad = _filter_loop(np.ascontiguousarray(y, dtype=float), model.Fd, model.Qd,
                                     float(model.noise_var), belief.mean.copy(), belief.cov.copy())
    if bad:
        raise GpNumericalFault("innovation variance is not positive", model.hyper)
    return GpBelief(m, P), loglik


def predict_horizon(belief: GpBelief, model: GpModel, n_steps: int):
    """Open-loop output means and variances for steps 1..n_steps.

    Returns ``(means, variances)``; the variances include the measurement
    noise, matching the disturbance model used for tightening.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return _predict_loop(belief.mean.copy(), belief.cov.copy(), model.Fd, model.Qd,
                         float(model.noise_var), int(n_steps))


@njit(cache=True)
def _predict_loop(m, P, Fd, Qd, noise_var, n_steps):
    # H = e_1 in the companion realization
    means = np.empty(n_steps)
    variances = np.empty(n_steps)
    for k in range(n_steps):
        m = Fd @ m
        P = Fd @ P @ Fd.T + Qd
        P = 0.5 * (P + P.T)
        means[k] = m[0]
        variances[k] = P[0, 0] + noise_var
    return means, variances


def _model_sensitivities(model: GpModel):
    """Derivatives of (Fd, Qd, Pinf, noise_var) w.r.t. the log-hyperparameters."""
    n = model.order
    F, Pinf, Fd, dt = model.F, model.Pinf, model.Fd, model.dt
    dFd = np.zeros((3, n, n))
    # F = F_1 / l, so d Fd / d log l = -dt F Fd (F commutes with its exponential)
    dFd[1] = -dt * F @ Fd
    # Pinf scales with the signal variance only
    dPinf = np.stack([Pinf, np.zeros((n, n)), np.zeros((n, n))])
    dQd = np.empty((3, n, n))
    for i in range(3):
        t = dFd[i] @ Pinf @ Fd.T
        dQd[i] = dPinf[i] - Fd @ dPinf[i] @ Fd.T - t - t.T
    dR = np.array([0.0, 0.0, model.noise_var])
    return dFd, dQd, dPinf, dR


def nll_gradient(y, hyper: Hyperparams, order: int = 6, dt: float = 0.1, model=None):
    """Negative log marginal likelihood and its gradient in log-hyperparameters.

    The gradient is propagated alongside the Kalman recursion (forward
    sensitivities of mean, covariance and innovation). A prebuilt ``model``
    for the same hyperparameters, order and step may be passed to save the
    realization.
    """
    y = np.ascontiguousarray(y, dtype=float)
    if y.size < 2:
        raise ValueError("need at least two samples")
    if model is None or model.hyper != hyper or model.order != order or model.dt != dt:
        model = build_lti(hyper, order, dt)
    dFd, dQd, dPinf, dR = _model_sensitivities(model)
    nll, grad, bad = _sensitivity_loop(y, model.Fd, model.Qd, float(model.noise_var),
                                       model.Pinf.copy(), dFd, dQd, dPinf, dR)
    if bad or not (math.isfinite(nll) and np.all(np.isfinite(grad))):
        raise GpNumericalFault("non-finite likelihood", hyper)
    return nll, grad


@njit(cache=True)
def _filter_loop(y, Fd, Qd, R, m, P):
    n = m.shape[0]
    total = 0.0
    for k in range(y.shape[0]):
        m = Fd @ m
        P = Fd @ P @ Fd.T + Qd
        S = P[0, 0] + R
        if not S > 0:
            return m, P, total, True
        v = y[k] - m[0]
        K = P[:, 0] / S
        # Joseph form with H = e_1
        IKH = np.eye(n)
        IKH[:, 0] -= K
        P = IKH @ P @ IKH.T + R * np.outer(K, K)
        P = 0.5 * (P + P.T)
        m = m + K * v
        total += -0.5 * (LOG_2PI + math.log(S) + v * v / S)
    return m, P, total, False


@njit(cache=True)
def _sensitivity_loop(y, Fd, Qd, R, P, dFd, dQd, dP, dR):
    n = P.shape[0]
    n_par = dFd.shape[0]
    m = np.zeros(n)
    dm = np.zeros((n_par, n))
    nll = 0.0
    grad = np.zeros(n_par)
    FdT = np.ascontiguousarray(Fd.T)
    for k in range(y.shape[0]):
        if k > 0:
            for i in range(n_par):
                dm[i] = Fd @ dm[i] + dFd[i] @ m
                t = dFd[i] @ P @ FdT
                dP[i] = t + t.T + Fd @ dP[i] @ FdT + dQd[i]
            m = Fd @ m
            P = Fd @ P @ FdT + Qd
        S = P[0, 0] + R
        if not S > 0:
            return nll, grad, True
        v = y[k] - m[0]
        nll += 0.5 * (LOG_2PI + math.log(S) + v * v / S)
        K = P[:, 0] / S
        for i in range(n_par):
            dS = dP[i, 0, 0] + dR[i]
            dv = -dm[i, 0]
            grad[i] += 0.5 * (dS / S + 2.0 * v * dv / S - v * v * dS / (S * S))
            dK = (dP[i, :, 0] - dS * K) / S
            dm[i] = dm[i] + dK * v + dv * K
            # P+ = P - S K K^T
            dKK = np.outer(dK, K)
            dP[i] = dP[i] - dS * np.outer(K, K) - S * (dKK + dKK.T)
        m = m + K * v
        P = P - S * np.outer(K, K)
        P = 0.5 * (P + P.T)
    return nll, grad, False


def hyper_step(hyper: Hyperparams, gradient, eta=(0.03, 0.01, 0.005)) -> Hyperparams:
    """Ascent step ``theta + eta * d loglik / d theta`` in log space.

    ``gradient`` is the gradient of the log likelihood (the negated output of
    :func:`nll_gradient`). A step that leaves the finite range is retried with
    halved rates.
    """
    eta = np.asarray(eta, dtype=float)
    if np.any(eta <= 0):
        raise ValueError("learning rates must be positive")
    theta = hyper.log_vector
    g = np.asarray(gradient, dtype=float)
    for _ in range(60):
        cand = np.clip(theta + eta * g, LOG_BOUNDS[:, 0], LOG_BOUNDS[:, 1])
        if np.all(np.isfinite(cand)):
            try:
                return Hyperparams.from_log(cand)
            except ValueError:
                pass
        eta = eta / 2
    return hyper


@dataclass
class OnlineGp:
    """One disturbance channel: sliding data window, learner and filter state.

    Each :meth:`add_sample` appends the newest measurement; :meth:`train_step`
    performs one likelihood-ascent step on the current window and refreshes
    the filtered belief at the newest sample.
    """

    hyper: Hyperparams = field(default_factory=Hyperparams)
    dt: float = 0.1
    order: int = 6
    batch_size: int = 50
    eta: tuple = (0.03, 0.01, 0.005)
    max_halvings: int = 8
    data: list = field(default_factory=list)
    n_updates: int = 0
    model: GpModel | None = None
    belief: GpBelief | None = None
    last_loglik: float = float("nan")

    def __post_init__(self):
        self.model = build_lti(self.hyper, self.order, self.dt)
        self.belief = self.model.prior()

    def add_sample(self, y: float):
        self.data.append(float(y))
        if len(self.data) > self.batch_size:
            del self.data[: len(self.data) - self.batch_size]
        self.belief, _ = kalman_update(self.belief, float(y), self.model)

    def train_step(self) -> bool:
        """One gradient step; returns True when the hyperparameters moved.

        Every call with at least two samples counts as an update, including
        steps damped to nothing by backtracking.
        """
        if len(self.data) < 2:
            return False
        nll, grad = nll_gradient(self.data, self.hyper, self.order, self.dt, self.model)
        eta = np.asarray(self.eta, dtype=float)
        accepted = False
        for _ in range(self.max_halvings):
            cand = hyper_step(self.hyper, -grad, eta)
            if cand == self.hyper:
                break
            try:
                model = build_lti(cand, self.order, self.dt)
                belief, ll = filter_batch(self.data, model)
            except (GpConstructionError, GpNumericalFault):
                ll = -float("inf")
            if math.isfinite(ll) and -ll <= nll:
                self.hyper, self.model = cand, model
                self.belief, self.last_loglik = belief, ll
                accepted = True
                break
            eta = eta / 2
        if not accepted:
            self.belief, self.last_loglik = filter_batch(self.data, self.model)
        self.n_updates += 1
        return accepted

    def horizon(self, n_steps: int):
        return predict_horizon(self.belief, self.model, n_steps)

    def snapshot(self) -> Hyperparams:
        return replace(self.hyper)
