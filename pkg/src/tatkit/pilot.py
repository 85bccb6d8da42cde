"""PID pilot: ego-frame waypoints -> steer / throttle / brake."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .numgrid import UsageError


def _clip(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


@dataclass(frozen=True)
class ControlCommand:
    """Actuation request; values are clamped into range on construction."""

    steer: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steer", _clip(float(self.steer), -1.0, 1.0))
        object.__setattr__(self, "throttle", _clip(float(self.throttle), 0.0, 1.0))
        object.__setattr__(self, "brake", _clip(float(self.brake), 0.0, 1.0))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.steer, self.throttle, self.brake)


@dataclass
class PidGains:
    kp: float
    ki: float
    kd: float


class PID:
    """Discrete PID on a per-step error with a clamped integral."""

    def __init__(self, gains: PidGains, dt: float = 0.5, integral_clamp: float = 2.0):
        self.gains = gains
        self.dt = dt
        self.integral_clamp = integral_clamp
        self.integral = 0.0
        self.previous: Optional[float] = None

    def reset(self) -> None:
        self.integral = 0.0
        self.previous = None

    def step(self, error: float) -> float:
        g = self.gains
        self.integral = _clip(self.integral + error * self.dt, -self.integral_clamp, self.integral_clamp)
        deriv = 0.0 if self.previous is None else (error - self.previous) / self.dt
        self.previous = error
        return g.kp * error + g.ki * self.integral + g.kd * deriv


@dataclass
class PilotConfig:
    lateral: PidGains = field(default_factory=lambda: PidGains(1.0, 0.0, 0.2))
    longitudinal: PidGains = field(default_factory=lambda: PidGains(0.5, 0.05, 0.1))
    integral_clamp: float = 2.0
    dt: float = 0.5
    speed_scale: float = 0.9
    sharp_turn_angle: float = 0.3  # rad
    sharp_turn_factor: float = 0.5

    @classmethod
    def tracking(cls) -> "PilotConfig":
        """Stiffer lateral loop used by the closed-loop harness.

        With kp = 1 the aim angle maps to about a third of the steering a
        radius-8 m turn needs and the car drifts wide by several metres.
        """
        return cls(lateral=PidGains(2.0, 0.0, 0.2))

    @classmethod
    def from_dict(cls, d: dict) -> "PilotConfig":
        d = dict(d)
        for key in ("lateral", "longitudinal"):
            if key in d and not isinstance(d[key], PidGains):
                d[key] = PidGains(**d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class PidState:
    """Lateral and longitudinal controller memory for one episode."""

    def __init__(self, config: Optional[PilotConfig] = None):
        self.config = config or PilotConfig()
        c = self.config
        self.lateral = PID(c.lateral, c.dt, c.integral_clamp)
        self.longitudinal = PID(c.longitudinal, c.dt, c.integral_clamp)

    def reset(self) -> None:
        self.lateral.reset()
        self.longitudinal.reset()


def waypoints_to_control(waypoints, speed: float, pid: PidState) -> ControlCommand:
    """Track the midpoint of the first two waypoints at their implied speed."""
    w = np.asarray(waypoints, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != 2 or w.shape[0] < 2:
        raise UsageError(f"need at least two (x, y) waypoints, got shape {w.shape}")
    c = pid.config
    aim = 0.5 * (w[0] + w[1])
    angle = math.atan2(aim[1], aim[0]) if np.any(aim) else 0.0
    steer = pid.lateral.step(angle)

    desired = float(np.linalg.norm(w[1] - w[0])) / c.dt * c.speed_scale
    if abs(angle) > c.sharp_turn_angle:
        desired *= c.sharp_turn_factor
    out = pid.longitudinal.step(desired - speed)
    throttle = out if out > 0 else 0.0
    brake = -out if out < 0 else 0.0
    return ControlCommand(steer, throttle, brake)
