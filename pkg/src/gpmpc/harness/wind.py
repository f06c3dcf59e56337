"""Filtered-noise wind and its aerodynamic force on the airframe."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter


@dataclass(frozen=True)
class WindModel:
    """Mean wind plus first-order low-pass filtered white noise.

    Each axis carries an independent Ornstein-Uhlenbeck component with
    stationary variance ``variance`` (m^2/s^2) and correlation time
    ``time_constant``. The force on the vehicle is ``gain * (v_wind - p_dot)``.
    """

    mean: tuple = (0.0, 0.0, 0.0)
    variance: float = 0.0
    time_constant: float = 1.0
    gain: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.mean) != 3:
            raise ValueError("mean wind needs three components")
        if self.variance < 0 or not self.time_constant > 0 or self.gain < 0:
            raise ValueError("variance and gain must be non-negative, time constant positive")

    def realize(self, n_steps: int, dt: float) -> "WindField":
        """Sample the air velocity on a uniform grid of ``n_steps`` points."""
        if not dt > 0:
            raise ValueError("dt must be positive")
        rng = np.random.default_rng(self.seed)
        a = math.exp(-dt / self.time_constant)
        s = math.sqrt(self.variance)
        drive = rng.standard_normal((n_steps, 3)) * (s * math.sqrt(1.0 - a * a))
        if n_steps:
            drive[0] = rng.standard_normal(3) * s   # start from the stationary law
        noise = lfilter([1.0], [1.0, -a], drive, axis=0)
        return WindField(np.asarray(self.mean, dtype=float) + noise, float(dt), self.gain)


@dataclass(frozen=True)
class WindField:
    """A realized air-velocity history, held constant over each grid cell."""

    velocity: np.ndarray   # (n, 3)
    dt: float
    gain: float

    def at(self, t: float) -> np.ndarray:
        k = min(max(int(math.floor(t / self.dt + 1e-9)), 0), len(self.velocity) - 1)
        return self.velocity[k]


def wind_force(t: float, state, wind: WindField) -> np.ndarray:
    """Drag force ``gain * (v_wind(t) - p_dot)`` in newtons."""
    p_dot = np.asarray(state, dtype=float)[3:6]
    return wind.gain * (wind.at(t) - p_dot)
