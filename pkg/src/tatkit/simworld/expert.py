"""Privileged rule-based driver used for labels and as a harness oracle."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..perception import world_to_ego
from ..pilot import ControlCommand
from .routes import Scenario
from .world import (EpisodeState, SimConfig, VehicleState, advance, obstacle_gap,
                    project_progress)


@dataclass
class ExpertConfig:
    cruise_speed: float = 6.0
    lateral_accel: float = 3.0  # caps speed at sqrt(a / curvature)
    comfort_decel: float = 2.5
    stop_gap: float = 5.0
    lookahead_min: float = 4.0
    lookahead_max: float = 10.0
    lookahead_offset: float = 3.0
    prediction_horizon: float = 3.0

    def to_dict(self) -> dict:
        return asdict(self)


def target_speed(vehicle: VehicleState, clock: float, progress: float, scenario: Scenario,
                 sim: SimConfig, cfg: ExpertConfig) -> float:
    line = scenario.route.line
    s, _ = project_progress(line, vehicle.x, vehicle.y, progress)
    v_star = cfg.cruise_speed
    kappa = line.max_curvature(s, s + 6.0 + 2.0 * vehicle.speed)
    if kappa > 1e-9:
        v_star = min(v_star, math.sqrt(cfg.lateral_accel / kappa))
    gap = obstacle_gap(vehicle, clock, progress, scenario, sim, horizon=cfg.prediction_horizon)
    if gap is not None:
        room = gap - cfg.stop_gap
        v_star = 0.0 if room <= 0.0 else min(v_star, math.sqrt(2.0 * cfg.comfort_decel * room))
    return v_star


def expert_control(vehicle: VehicleState, clock: float, progress: float, scenario: Scenario,
                   sim: Optional[SimConfig] = None,
                   cfg: Optional[ExpertConfig] = None) -> tuple[ControlCommand, float]:
    """Pure pursuit on the centerline plus a speed rule; returns (control, target speed)."""
    sim = sim or SimConfig()
    cfg = cfg or ExpertConfig()
    line = scenario.route.line
    s, _ = project_progress(line, vehicle.x, vehicle.y, progress)

    ld = min(max(vehicle.speed + cfg.lookahead_offset, cfg.lookahead_min), cfg.lookahead_max)
    goal = line.point_at(s + ld)
    local = world_to_ego(goal[None], vehicle.x, vehicle.y, vehicle.heading)[0]
    dist = math.hypot(local[0], local[1])
    alpha = math.atan2(local[1], local[0])
    delta = math.atan(2.0 * sim.wheelbase * math.sin(alpha) / max(dist, 1e-6))
    steer = delta / sim.max_steer

    v_star = target_speed(vehicle, clock, progress, scenario, sim, cfg)
    if v_star <= 0.0:
        brake = max(0.25, (vehicle.speed / sim.dt - sim.drag) / sim.brake_decel)
        return ControlCommand(steer, 0.0, brake), 0.0
    a_req = (v_star - vehicle.speed) / sim.dt
    if a_req >= -sim.drag:
        return ControlCommand(steer, (a_req + sim.drag) / sim.throttle_accel, 0.0), v_star
    return ControlCommand(steer, 0.0, (-sim.drag - a_req) / sim.brake_decel), v_star


def rollout_labels(vehicle: VehicleState, clock: float, progress: float, scenario: Scenario,
                   n_waypoints: int = 4, sim: Optional[SimConfig] = None,
                   cfg: Optional[ExpertConfig] = None) -> np.ndarray:
    """The expert's own next ``n_waypoints`` positions, in the current ego frame."""
    sim = sim or SimConfig()
    line = scenario.route.line
    v, t, p = vehicle, clock, progress
    out = np.zeros((n_waypoints, 2))
    for i in range(n_waypoints):
        ctrl, _ = expert_control(v, t, p, scenario, sim, cfg)
        v = advance(v, ctrl, sim)
        t += sim.dt
        s, _ = project_progress(line, v.x, v.y, p)
        p = max(p, s)
        out[i] = (v.x, v.y)
    return world_to_ego(out, vehicle.x, vehicle.y, vehicle.heading)


def expert_policy(state: EpisodeState, n_waypoints: int = 4,
                  cfg: Optional[ExpertConfig] = None) -> tuple[np.ndarray, ControlCommand]:
    """Ground-truth waypoints (Z x 2, ego frame) and the expert's control."""
    args = (state.vehicle, state.clock, state.progress, state.scenario, state.config, cfg)
    control, _ = expert_control(*args)
    waypoints = rollout_labels(state.vehicle, state.clock, state.progress, state.scenario,
                               n_waypoints, state.config, cfg)
    return waypoints, control


class ExpertDriver:
    """Agent wrapper so the expert can drive ``run_episode``."""

    def __init__(self, cfg: Optional[ExpertConfig] = None):
        self.cfg = cfg

    def __call__(self, state: EpisodeState) -> ControlCommand:
        control, _ = expert_control(state.vehicle, state.clock, state.progress, state.scenario,
                                    state.config, self.cfg)
        return control
