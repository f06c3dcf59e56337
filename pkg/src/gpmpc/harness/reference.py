"""Reference trajectories: a hover point or a rounded-rectangle circuit."""

from __future__ import annotations

import math

import numpy as np

from ..dynamics import NX


class Reference:
    """Position and velocity reference as a function of time.

    The circuit holds at ``start`` for ``hold_time`` seconds, then runs
    counter-clockwise around a square of side ``side`` with rounded corners,
    speeding up linearly to ``speed`` over ``ramp_time``. ``kind="hover"``
    holds at ``start`` forever.
    """

    def __init__(self, kind="circuit", start=(0.0, 0.0, 3.0), side=10.0, corner_radius=2.0,
                 speed=1.5, ramp_time=2.0, hold_time=8.0):
        if kind not in ("circuit", "hover"):
            raise ValueError(f"unknown reference kind {kind!r}")
        if kind == "circuit":
            if not (0 <= corner_radius <= side / 2 and speed > 0 and ramp_time >= 0
                    and hold_time >= 0):
                raise ValueError("invalid circuit geometry or timing")
        self.kind = kind
        self.start = np.asarray(start, dtype=float)
        self.side, self.radius = float(side), float(corner_radius)
        self.speed, self.ramp, self.hold = float(speed), float(ramp_time), float(hold_time)
        half, r = self.side / 2, self.radius
        straight = self.side - 2 * r
        self.perimeter = 4 * straight + 2 * math.pi * r
        # the path starts at the middle of the lower edge, heading +x;
        # each piece is (kind, length, arc center, heading at entry)
        centers = [(half - r, -half + r), (half - r, half - r), (-half + r, half - r),
                   (-half + r, -half + r)]
        self._pieces = [("line", straight / 2, None, 0.0)]
        for i in range(4):
            heading = i * math.pi / 2
            self._pieces.append(("arc", 0.5 * math.pi * r, np.array(centers[i]), heading))
            self._pieces.append(("line", straight / 2 if i == 3 else straight, None,
                                 heading + math.pi / 2))

    @classmethod
    def from_settings(cls, s) -> "Reference":
        return cls(s.kind, s.start, s.side, s.corner_radius, s.speed, s.ramp_time, s.hold_time)

    def arc_length(self, t):
        """Distance travelled along the circuit and the current path speed."""
        tau = t - self.hold
        if self.kind == "hover" or tau <= 0:
            return 0.0, 0.0
        if tau < self.ramp:
            return 0.5 * self.speed * tau * tau / self.ramp, self.speed * tau / self.ramp
        return self.speed * (tau - 0.5 * self.ramp), self.speed

    def _point(self, s):
        """Offset and unit tangent at arc length ``s`` from the start point."""
        s = s % self.perimeter if self.perimeter > 0 else 0.0
        r = self.radius
        pos = np.array([0.0, -self.side / 2])
        for kind, length, c, heading in self._pieces:
            if kind == "line":
                d = np.array([math.cos(heading), math.sin(heading)])
                if s <= length:
                    return pos + s * d, d
                pos = pos + length * d
            else:
                a0 = heading - math.pi / 2
                if s <= length:
                    a = a0 + (s / r if r > 0 else 0.0)
                    return (c + r * np.array([math.cos(a), math.sin(a)]),
                            np.array([-math.sin(a), math.cos(a)]))
                a1 = a0 + math.pi / 2
                pos = c + r * np.array([math.cos(a1), math.sin(a1)])
            s -= length
        return pos, np.array([1.0, 0.0])

    def position_velocity(self, t):
        s, v = self.arc_length(t)
        if self.kind == "hover":
            return self.start.copy(), np.zeros(3)
        offset, tangent = self._point(s)
        center = self.start + np.array([0.0, self.side / 2, 0.0])
        pos = center + np.array([offset[0], offset[1], 0.0])
        return pos, np.array([tangent[0] * v, tangent[1] * v, 0.0])

    def state(self, t) -> np.ndarray:
        x = np.zeros(NX)
        x[0:3], x[3:6] = self.position_velocity(t)
        return x

    def window(self, t0: float, dt: float, n: int) -> np.ndarray:
        """Reference states at ``t0, t0 + dt, ..., t0 + n dt``; shape ``(n + 1, NX)``."""
        return np.array([self.state(t0 + k * dt) for k in range(n + 1)])

    def positions(self, times) -> np.ndarray:
        return np.array([self.position_velocity(t)[0] for t in times])
