"""Synthetic closed-loop driving world."""

from .expert import (ExpertConfig, ExpertDriver, expert_control, expert_policy, rollout_labels,
                     target_speed)
from .metrics import DEFAULT_PENALTIES, MetricsReport, RouteScore, infraction_score, score, score_route
from .routes import (Intersection, Obstacle, Polyline, RouteSpec, Scenario, generate_route,
                     generate_scenario, populate_obstacles)
from .world import (CATEGORIES, EpisodeResult, EpisodeState, Infraction, SimConfig, VehicleState,
                    advance, obstacle_gap, run_episode, start_episode, step, wrap_angle)

__all__ = [
    "CATEGORIES", "DEFAULT_PENALTIES", "EpisodeResult", "EpisodeState", "ExpertConfig",
    "ExpertDriver", "Infraction", "Intersection", "MetricsReport", "Obstacle", "Polyline",
    "RouteScore", "RouteSpec", "Scenario", "SimConfig", "VehicleState", "advance",
    "expert_control", "expert_policy", "generate_route", "generate_scenario",
    "infraction_score", "obstacle_gap", "populate_obstacles", "rollout_labels", "run_episode",
    "score", "score_route", "start_episode", "step", "target_speed", "wrap_angle",
]
