"""Closed-loop episodes: nominal MPC until the GPs are trained, then GP-MPC."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..dynamics import NX, QuadState, SimulationFault, integrate_steps, saturate_input
from ..qpsolve import verify_kkt
from ..smpc import STATE_NAMES, MpcController
from ..ssgp import GpNumericalFault, OnlineGp, kalman_predict
from .config import ScenarioConfig
from .reference import Reference
from .wind import WindModel

DIVERGENCE_FACTOR = 10.0
KKT_TOL = 1e-5

TRAJECTORY_COLUMNS = (
    ["t"] + STATE_NAMES + ["ref_x", "ref_y", "ref_z"]
    + ["u_thrust", "u_tau_x", "u_tau_y", "u_tau_z"]
    + ["f_x", "f_y", "f_z", "d_x", "d_y", "d_z"]
    + ["gp_mean_x", "gp_mean_y", "gp_mean_z", "gp_std_x", "gp_std_y", "gp_std_z"]
    + ["margin", "gp_mode"]
)
TIMING_COLUMNS = ["t", "gp_mode", "step_ms", "solve_ms", "iterations", "softened", "polished",
                  "kkt_residual", "train_ms"]
GP_TRACE_COLUMNS = ["t", "axis", "n_updates", "signal_var", "length_scale", "noise_var",
                    "loglik", "sample"]

STATUS_OK = "ok"
STATUS_SOLVER_FAULT = "solver-fault"
STATUS_DIVERGED = "diverged"


class EpisodeAbort(RuntimeError):
    def __init__(self, status, message):
        super().__init__(message)
        self.status = status


@dataclass
class FlightLog:
    """Per-tick records at the simulation rate, stored column-wise."""

    trajectory: np.ndarray
    timings: np.ndarray
    gp_trace: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return self.trajectory[:, TRAJECTORY_COLUMNS.index(name)]

    @property
    def times(self) -> np.ndarray:
        return self.column("t")

    @property
    def positions(self) -> np.ndarray:
        return self.trajectory[:, 1:4]

    @property
    def reference_positions(self) -> np.ndarray:
        i = TRAJECTORY_COLUMNS.index("ref_x")
        return self.trajectory[:, i:i + 3]


@dataclass
class EpisodeResult:
    config: ScenarioConfig
    log: FlightLog
    status: str = STATUS_OK
    message: str = ""
    metrics: dict = field(default_factory=dict)


def extract_disturbance(measured, predicted, dt: float) -> np.ndarray:
    """Velocity residual over one predictor step divided by its length (m/s^2)."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if isinstance(measured, QuadState):
        measured = measured.as_vector()
    if isinstance(predicted, QuadState):
        predicted = predicted.as_vector()
    measured, predicted = np.asarray(measured, dtype=float), np.asarray(predicted, dtype=float)
    return (measured[3:6] - predicted[3:6]) / dt


def rms_error(positions, reference) -> float:
    """Root-mean-square Euclidean distance between two position histories."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    if positions.size == 0:
        raise ValueError("empty log")
    if positions.shape != reference.shape:
        raise ValueError("positions and reference differ in shape")
    return float(np.sqrt(np.mean(np.sum((positions - reference) ** 2, axis=1))))


def run_episode(cfg: ScenarioConfig, controller: MpcController | None = None) -> EpisodeResult:
    """Simulate one closed-loop flight; aborts are reported in the result status."""
    dt_sim, tpc, cpi = cfg.dt_sim, cfg.ticks_per_control, cfg.controls_per_interval
    dT, N = cfg.mpc.dt, cfg.mpc.horizon
    n_ctrl = int(round(cfg.duration * cfg.control_rate))
    n_ticks = n_ctrl * tpc
    quad = cfg.quad
    u_trim = np.array([cfg.mpc.u_hover, 0.0, 0.0, 0.0])

    ref = Reference.from_settings(cfg.reference)
    w = cfg.wind
    wind = WindModel(w.mean, w.variance, w.time_constant, w.gain, cfg.seed).realize(n_ticks, dt_sim)
    ctrl = controller or MpcController(quad, cfg.mpc)
    ctrl.reset()
    gps = [OnlineGp(cfg.gp.initial_hyper(), dT, cfg.gp.order, cfg.gp.batch_size,
                    tuple(cfg.gp.eta)) for _ in range(3)]
    learn = cfg.controller == "gp"
    bounds = np.asarray(cfg.mpc.state_bounds)[:3] * DIVERGENCE_FACTOR

    traj = np.full((n_ticks, len(TRAJECTORY_COLUMNS)), np.nan)
    timings = np.full((n_ctrl, len(TIMING_COLUMNS)), np.nan)
    trace = []
    x = ref.state(0.0)
    x_interval, interval_inputs = x.copy(), []
    d_last = np.zeros(3)
    status, message, done = STATUS_OK, "", 0

    try:
        for c in range(n_ctrl):
            t = c * tpc * dt_sim
            train_due = False
            if c > 0 and c % cpi == 0:
                x_pred = x_interval
                for u_prev in interval_inputs:
                    x_pred, _ = integrate_steps(x_pred, u_prev, quad, dt_sim, tpc)
                d_last = extract_disturbance(x, x_pred, dT)
                for gp, y in zip(gps, d_last):
                    gp.add_sample(y)
                x_interval, interval_inputs = x.copy(), []
                train_due = learn

            use_gp = learn and min(gp.n_updates for gp in gps) >= cfg.gp.switch_after
            window = ref.window(t, dT, N)
            if use_gp:
                beliefs = [kalman_predict(gp.belief, gp.model) for gp in gps]
                models = [gp.model for gp in gps]
                res = ctrl.solve_gp(x, window, models, beliefs)
                gp_mean = np.array([b.mean[0] for b in beliefs])
                gp_std = np.sqrt([b.cov[0, 0] + m.noise_var for b, m in zip(beliefs, models)])
            else:
                res = ctrl.solve_nominal(x, window)
                gp_mean = gp_std = np.full(3, np.nan)
            sol = res.solution
            if not res.usable:
                raise EpisodeAbort(STATUS_SOLVER_FAULT,
                                   f"MPC solve failed at t={t:.3f} s ({sol.status})")
            qp = ctrl.last_soft_problem if res.softened else res.problem.qp
            kkt = max(verify_kkt(qp, sol, KKT_TOL)[1].values())

            u = saturate_input(res.first + u_trim)
            interval_inputs.append(u)

            train_ms = np.nan
            if train_due:
                t0 = time.perf_counter()
                for _ in range(cfg.gp.steps_per_interval):
                    for gp in gps:
                        gp.train_step()
                train_ms = (time.perf_counter() - t0) * 1e3 / (3 * cfg.gp.steps_per_interval)
                for axis, gp in enumerate(gps):
                    h = gp.hyper
                    trace.append([t, axis, gp.n_updates, h.signal_var, h.length_scale,
                                  h.noise_var, gp.last_loglik, d_last[axis]])

            timings[c] = [t, float(use_gp), res.total_time * 1e3, res.solve_time * 1e3,
                          sol.iterations, float(res.softened), float(sol.polished), kkt, train_ms]

            i0 = c * tpc
            x_next, forces, states = integrate_steps(
                x, u, quad, dt_sim, tpc, air_velocity=wind.velocity[i0:i0 + tpc],
                air_gain=wind.gain, return_states=True)
            tt = (i0 + np.arange(tpc)) * dt_sim
            rows = traj[i0:i0 + tpc]
            rows[:, 0] = tt
            rows[:, 1:1 + NX] = states
            rows[:, 13:16] = ref.positions(tt)
            rows[:, 16:20] = u
            rows[:, 20:23] = forces
            rows[:, 23:26] = d_last
            rows[:, 26:29] = gp_mean
            rows[:, 29:32] = gp_std
            rows[:, 32] = res.min_margin
            rows[:, 33] = float(use_gp)
            done = c + 1
            x = x_next
            if np.any(np.abs(x[:3]) > bounds):
                raise EpisodeAbort(STATUS_DIVERGED,
                                   f"position left 10x the state bounds at t={t:.3f} s")
    except EpisodeAbort as exc:
        status, message = exc.status, str(exc)
    except SimulationFault as exc:
        status, message = STATUS_DIVERGED, str(exc)
    except GpNumericalFault as exc:
        status, message = STATUS_SOLVER_FAULT, f"GP fault: {exc}"

    log = FlightLog(traj[: done * tpc], timings[:done],
                    np.array(trace, dtype=float).reshape(-1, len(GP_TRACE_COLUMNS)))
    result = EpisodeResult(cfg, log, status, message)
    result.metrics = episode_metrics(result, gps)
    return result


def episode_metrics(result: EpisodeResult, gps=None) -> dict:
    cfg, log = result.config, result.log
    out = {"status": result.status, "controller": cfg.controller, "seed": cfg.seed}
    tm = log.timings
    if len(log.trajectory):
        mask = log.times >= cfg.metric_window_start - 1e-12
        if not np.any(mask):
            mask = np.ones(len(log.times), dtype=bool)
        err = log.positions[mask] - log.reference_positions[mask]
        out["rms"] = rms_error(log.positions[mask], log.reference_positions[mask])
        for i, axis in enumerate("xyz"):
            out[f"rms_{axis}"] = float(np.sqrt(np.mean(err[:, i] ** 2)))
    else:
        out["rms"] = out["rms_x"] = out["rms_y"] = out["rms_z"] = math.nan
    gp_rows = tm[:, 1] == 1.0 if len(tm) else np.zeros(0, dtype=bool)
    out["steps"] = int(len(tm))
    out["gp_steps"] = int(np.sum(gp_rows))
    out["switch_time"] = float(tm[gp_rows, 0][0]) if np.any(gp_rows) else math.nan
    out["mean_step_ms_nominal"] = _mean(tm[~gp_rows, 2]) if len(tm) else math.nan
    out["mean_step_ms_gp"] = _mean(tm[gp_rows, 2]) if len(tm) else math.nan
    out["mean_train_ms"] = _mean(tm[:, 8]) if len(tm) else math.nan
    out["softened"] = int(np.nansum(tm[:, 5])) if len(tm) else 0
    out["max_kkt_residual"] = float(np.nanmax(tm[:, 7])) if len(tm) else math.nan
    if gps:
        out["hyper_updates"] = int(min(gp.n_updates for gp in gps))
    return out


def _mean(values) -> float:
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    return float(values.mean()) if values.size else math.nan
