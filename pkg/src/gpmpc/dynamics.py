"""Rigid-body quadcopter model, hover linearization and exact discretization.

State layout (12): ``p`` (0:3), ``p_dot`` (3:6), Euler angles roll/pitch/yaw
(6:9) and Euler rates (9:12). Inputs are normalized: thrust fraction in
[0, 1] and three torque fractions in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.linalg import expm

NX = 12
NU = 4
GRAVITY = 9.81


class SimulationFault(RuntimeError):
    """Raised when the truth integrator produces a non-finite state."""


@dataclass(frozen=True)
class QuadParams:
    """Physical parameters; defaults describe a 1.862 kg hexa-class airframe."""

    mass: float = 1.862
    ixx: float = 0.0429
    iyy: float = 0.0437
    izz: float = 0.0753
    k_drag: float = 0.1735
    thrust_max: float = 62.06
    tau_x_max: float = 4.6548
    tau_y_max: float = 4.6548
    tau_z_max: float = 1.7
    g: float = GRAVITY

    def __post_init__(self):
        for name in ("mass", "ixx", "iyy", "izz", "thrust_max",
                     "tau_x_max", "tau_y_max", "tau_z_max", "g"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value}")
        if not (math.isfinite(self.k_drag) and self.k_drag >= 0):
            raise ValueError(f"k_drag must be non-negative, got {self.k_drag}")

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.g / self.thrust_max

    @property
    def u_hover(self) -> np.ndarray:
        return np.array([self.hover_thrust, 0.0, 0.0, 0.0])


@dataclass
class QuadState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p_dot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi_dot: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.p_dot, self.phi, self.phi_dot]).astype(float)

    @classmethod
    def from_vector(cls, x) -> "QuadState":
        x = np.asarray(x, dtype=float)
        if x.shape != (NX,):
            raise ValueError(f"expected a {NX}-vector, got shape {x.shape}")
        return cls(x[0:3].copy(), x[3:6].copy(), x[6:9].copy(), x[9:12].copy())

    def wrapped(self) -> "QuadState":
        """Copy with Euler angles mapped into (-pi, pi]."""
        return QuadState(self.p.copy(), self.p_dot.copy(), wrap_angles(self.phi),
                         self.phi_dot.copy())


def wrap_angles(angles):
    a = np.asarray(angles, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def saturate_input(u) -> np.ndarray:
    """Clip to the physical actuator range; rotors cannot push down."""
    u = np.asarray(u, dtype=float)
    return np.array([min(max(u[0], 0.0), 1.0),
                     min(max(u[1], -1.0), 1.0),
                     min(max(u[2], -1.0), 1.0),
                     min(max(u[3], -1.0), 1.0)])


def nonlinear_derivative(x, u, params: QuadParams, latent_force=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Time derivative of the full nonlinear state.

    Translational part is ``(R e_z T - m g e_z - k_D p_dot + f_latent) / m``.
    The rotational part integrates body rates ``omega`` through the diagonal
    inertia with the gyroscopic term and maps them to Euler rates with the
    roll/pitch-dependent ZYX kinematics.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))
            and np.all(np.isfinite(latent_force))):
        raise ValueError("non-finite state, input or latent force")
    return _rhs(x, _wrench(saturate_input(u), params),
                np.asarray(latent_force, dtype=float), _param_vector(params))


def _wrench(u, params):
    return np.array([u[0] * params.thrust_max, u[1] * params.tau_x_max,
                     u[2] * params.tau_y_max, u[3] * params.tau_z_max])


def _param_vector(params):
    return np.array([params.mass, params.ixx, params.iyy, params.izz, params.k_drag, params.g])


@njit(cache=True)
def _rhs(x, wrench, force, pv):
    thrust, tx, ty, tz = wrench[0], wrench[1], wrench[2], wrench[3]
    m, ixx, iyy, izz, kd, g = pv[0], pv[1], pv[2], pv[3], pv[4], pv[5]
    vx, vy, vz = x[3], x[4], x[5]
    phi, theta, psi = x[6], x[7], x[8]
    dphi, dtheta, dpsi = x[9], x[10], x[11]
    sphi, cphi = math.sin(phi), math.cos(phi)
    sth, cth = math.sin(theta), math.cos(theta)
    spsi, cpsi = math.sin(psi), math.cos(psi)
    tth = sth / cth
    secth = 1.0 / cth

    # body z-axis expressed in the inertial frame (third column of R_zyx)
    bx = cpsi * sth * cphi + spsi * sphi
    by = spsi * sth * cphi - cpsi * sphi
    bz = cth * cphi
    ax = (bx * thrust - kd * vx + force[0]) / m
    ay = (by * thrust - kd * vy + force[1]) / m
    az = (bz * thrust - m * g - kd * vz + force[2]) / m

    # Euler rates -> body rates (inverse ZYX kinematics)
    wx = dphi - sth * dpsi
    wy = cphi * dtheta + sphi * cth * dpsi
    wz = -sphi * dtheta + cphi * cth * dpsi

    dwx = (tx - (izz - iyy) * wy * wz) / ixx
    dwy = (ty - (ixx - izz) * wz * wx) / iyy
    dwz = (tz - (iyy - ixx) * wx * wy) / izz

    # Euler acceleration = W dw + (dW/dt) w
    ddphi = (dwx + sphi * tth * dwy + cphi * tth * dwz
             + (cphi * tth * dphi + sphi * secth * secth * dtheta) * wy
             + (-sphi * tth * dphi + cphi * secth * secth * dtheta) * wz)
    ddtheta = cphi * dwy - sphi * dwz - sphi * dphi * wy - cphi * dphi * wz
    ddpsi = (sphi * secth * dwy + cphi * secth * dwz
             + (cphi * secth * dphi + sphi * tth * secth * dtheta) * wy
             + (-sphi * secth * dphi + cphi * tth * secth * dtheta) * wz)
    return np.array([vx, vy, vz, ax, ay, az, dphi, dtheta, dpsi, ddphi, ddtheta, ddpsi])


@dataclass(frozen=True)
class LinearModel:
    """Continuous hover model ``x_dot = A x + B (u - u_s)``."""

    A: np.ndarray
    B: np.ndarray
    u_s: np.ndarray

    @property
    def A1(self) -> np.ndarray:
        return self.A[3:6, 6:9]

    @property
    def B1(self) -> np.ndarray:
        return self.B[3:6, :]

    @property
    def B2(self) -> np.ndarray:
        return self.B[9:12, :]


@dataclass(frozen=True)
class DiscreteModel:
    Ad: np.ndarray
    Bd: np.ndarray
    dt: float


def linearize_hover(params: QuadParams) -> LinearModel:
    g, m = params.g, params.mass
    A = np.zeros((NX, NX))
    A[0:3, 3:6] = np.eye(3)
    A[3:6, 3:6] = -params.k_drag / m * np.eye(3)
    A[3:6, 6:9] = np.array([[0.0, g, 0.0], [-g, 0.0, 0.0], [0.0, 0.0, 0.0]])
    A[6:9, 9:12] = np.eye(3)
    B = np.zeros((NX, NU))
    B[5, 0] = params.thrust_max / m
    B[9, 1] = params.tau_x_max / params.ixx
    B[10, 2] = params.tau_y_max / params.iyy
    B[11, 3] = params.tau_z_max / params.izz
    return LinearModel(A, B, params.u_hover)


def discretize_exact(A, B, dt: float) -> DiscreteModel:
    """Zero-order-hold discretization via the exponential of ``[[A, B], [0, 0]] dt``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    n, nu = A.shape[0], B.shape[1]
    M = np.zeros((n + nu, n + nu))
    M[:n, :n] = A
    M[:n, n:] = B
    E = expm(M * dt)
    return DiscreteModel(E[:n, :n], E[:n, n:], float(dt))


def integrate_truth(x, u, params: QuadParams, latent_force, dt_sim: float) -> np.ndarray:
    """One classical RK4 step of the nonlinear model with inputs held constant."""
    if not dt_sim > 0:
        raise ValueError(f"dt_sim must be positive, got {dt_sim}")
    x = np.asarray(x, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))
            and np.all(np.isfinite(latent_force))):
        raise ValueError("non-finite state, input or latent force")
    x_next = _rk4(x, _wrench(saturate_input(u), params),
                  np.asarray(latent_force, dtype=float), _param_vector(params), float(dt_sim))
    if not np.all(np.isfinite(x_next)):
        raise SimulationFault("truth integration produced a non-finite state")
    return x_next


@njit(cache=True)
def _rk4(x, wrench, force, pv, h):
    k1 = _rhs(x, wrench, force, pv)
    k2 = _rhs(x + 0.5 * h * k1, wrench, force, pv)
    k3 = _rhs(x + 0.5 * h * k2, wrench, force, pv)
    k4 = _rhs(x + h * k3, wrench, force, pv)
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_steps(x, u, params: QuadParams, dt_sim: float, n_steps: int,
                    force=(0.0, 0.0, 0.0), air_velocity=None, air_gain: float = 0.0,
                    return_states: bool = False):
    """Take ``n_steps`` RK4 steps with the input held.

    The latent force of step ``k`` is ``force + air_gain * (air_velocity[k] - p_dot)``,
    evaluated at the start of the step and held over it. Returns the final
    state and the ``(n_steps, 3)`` latent forces that were applied; with
    ``return_states`` also the ``(n_steps, NX)`` states at the start of each step.
    """
    if not dt_sim > 0:
        raise ValueError(f"dt_sim must be positive, got {dt_sim}")
    x = np.asarray(x, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or input")
    if air_velocity is None:
        air_velocity = np.zeros((n_steps, 3))
    air_velocity = np.ascontiguousarray(air_velocity, dtype=float).reshape(n_steps, 3)
    x_next, forces, states = _integrate_loop(x, _wrench(saturate_input(u), params),
                                             np.asarray(force, dtype=float), air_velocity,
                                             float(air_gain), _param_vector(params), float(dt_sim))
    if not np.all(np.isfinite(x_next)):
        raise SimulationFault("truth integration produced a non-finite state")
    if return_states:
        return x_next, forces, states
    return x_next, forces


@njit(cache=True)
def _integrate_loop(x, wrench, force, air_velocity, air_gain, pv, h):
    n = air_velocity.shape[0]
    applied = np.empty((n, 3))
    states = np.empty((n, x.shape[0]))
    f = np.empty(3)
    for k in range(n):
        states[k] = x
        for i in range(3):
            f[i] = force[i] + air_gain * (air_velocity[k, i] - x[3 + i])
            applied[k, i] = f[i]
        x = _rk4(x, wrench, f, pv, h)
    return x, applied, states


def rollout(x, inputs, params: QuadParams, dt_sim: float, latent_force=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Integrate a sequence of per-substep inputs; returns the final state."""
    for u in inputs:
        x = integrate_truth(x, u, params, latent_force, dt_sim)
    return x
