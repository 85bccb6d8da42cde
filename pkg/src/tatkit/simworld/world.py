"""Kinematic bicycle world with infraction detection."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import shapely

from ..numgrid import UsageError
from ..perception import box_corners, world_to_ego
from ..pilot import ControlCommand
from .routes import Obstacle, Scenario

CATEGORIES = ("collision_vehicle", "collision_layout", "off_road", "blocked")


@dataclass
class SimConfig:
    dt: float = 0.5
    wheelbase: float = 2.5
    max_steer: float = 0.6  # rad
    throttle_accel: float = 3.0
    brake_decel: float = 8.0
    drag: float = 0.5
    vehicle_length: float = 4.5
    vehicle_width: float = 1.8
    blocked_speed: float = 0.1
    blocked_steps: int = 20
    deviation_limit: float = 10.0
    initial_speed: float = 6.0
    cruise_speed: float = 6.0
    stop_gap: float = 5.0
    timeout_factor: float = 3.0
    penalties: dict = field(default_factory=lambda: {
        "collision_vehicle": 0.60, "collision_layout": 0.65, "off_road": 0.80})

    def max_steps(self, length: float) -> int:
        return int(math.ceil(length / (self.cruise_speed * self.dt) * self.timeout_factor)) + 40

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def wrap_angle(a: float) -> float:
    """Wrap into (-pi, pi]; angles already in range come back unchanged."""
    if -math.pi < a <= math.pi:
        return a
    w = math.fmod(a + math.pi, 2 * math.pi)
    if w < 0:
        w += 2 * math.pi
    w -= math.pi
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"speed must be non-negative, got {self.speed}")
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))


@dataclass(frozen=True)
class Infraction:
    kind: str
    clock: float
    step: int
    other: Optional[int] = None


def _as_control(control) -> ControlCommand:
    if isinstance(control, ControlCommand):
        steer, throttle, brake = control.as_tuple()
    else:
        steer, throttle, brake = (float(v) for v in control)
    if not (-1.0 <= steer <= 1.0 and 0.0 <= throttle <= 1.0 and 0.0 <= brake <= 1.0):
        raise UsageError(f"control out of range: steer={steer}, throttle={throttle}, brake={brake}")
    return control if isinstance(control, ControlCommand) else ControlCommand(steer, throttle, brake)


def advance(v: VehicleState, control: ControlCommand, cfg: SimConfig) -> VehicleState:
    """One control period of the bicycle model, integrated exactly along the arc."""
    dt = cfg.dt
    accel = cfg.throttle_accel * control.throttle - cfg.brake_decel * control.brake - cfg.drag
    if v.speed + accel * dt >= 0.0:
        dist = v.speed * dt + 0.5 * accel * dt * dt
        speed = v.speed + accel * dt
    else:
        dist = 0.5 * v.speed * (v.speed / -accel)  # decelerates to rest inside the step
        speed = 0.0
    curvature = math.tan(cfg.max_steer * control.steer) / cfg.wheelbase
    turn = curvature * dist
    h0 = v.heading
    if abs(turn) < 1e-12:
        x = v.x + dist * math.cos(h0)
        y = v.y + dist * math.sin(h0)
        h1 = h0
    else:
        h1 = h0 + turn
        x = v.x + (math.sin(h1) - math.sin(h0)) / curvature
        y = v.y + (math.cos(h0) - math.cos(h1)) / curvature
    return VehicleState(x, y, h1, speed)


@dataclass
class EpisodeState:
    vehicle: VehicleState
    scenario: Scenario
    config: SimConfig = field(default_factory=SimConfig)
    clock: float = 0.0
    step_index: int = 0
    progress: float = 0.0
    lateral: float = 0.0
    odometer: float = 0.0
    events: list = field(default_factory=list)
    off_road: bool = False
    contacts: frozenset = frozenset()
    low_speed_steps: int = 0
    done: bool = False
    status: str = "running"

    # -- scene views used by the point-cloud synthesiser ---------------------
    @property
    def route(self):
        return self.scenario.route

    def ego_pose(self) -> tuple[float, float, float]:
        v = self.vehicle
        return v.x, v.y, v.heading

    @property
    def edge_points(self) -> np.ndarray:
        return self.route.edge_points

    def obstacle_boxes(self, radius: float = 60.0):
        v = self.vehicle
        out = []
        for o in self.scenario.obstacles:
            box = o.box(self.clock)
            if abs(box[0] - v.x) + abs(box[1] - v.y) < radius:
                out.append(box)
        return out

    def target_point_world(self) -> np.ndarray:
        return self.route.target_points[self.route.next_target_index(self.progress)]

    def target_point_ego(self) -> np.ndarray:
        v = self.vehicle
        return world_to_ego(self.target_point_world()[None], v.x, v.y, v.heading)[0]

    @property
    def route_completion(self) -> float:
        return float(min(100.0, 100.0 * (self.progress / self.route.length)))


def start_episode(scenario: Scenario, config: Optional[SimConfig] = None,
                  speed: Optional[float] = None) -> EpisodeState:
    cfg = config or SimConfig()
    line = scenario.route.line
    p = line.vertices[0]
    v = VehicleState(float(p[0]), float(p[1]), line.heading_at(0.0),
                     cfg.initial_speed if speed is None else speed)
    return EpisodeState(v, scenario, cfg)


def project_progress(line, x: float, y: float, progress: float) -> tuple[float, float]:
    """Arc-length and lateral offset, searched near the current progress."""
    return line.project((x, y), progress - 5.0, progress + 20.0)


def _footprint(v: VehicleState, cfg: SimConfig):
    return shapely.Polygon(box_corners(v.x, v.y, v.heading, cfg.vehicle_length, cfg.vehicle_width))


def obstacle_gap(vehicle: VehicleState, clock: float, progress: float, scenario: Scenario,
                 cfg: SimConfig, lookahead: float = 25.0, horizon: float = 3.0) -> Optional[float]:
    """Smallest bumper gap along the route to an obstacle now or soon in the lane.

    Privileged: uses the scripted obstacle motion up to ``horizon`` seconds
    ahead.  Returns ``None`` when the lane ahead is clear.
    """
    line = scenario.route.line
    s_ego, _ = project_progress(line, vehicle.x, vehicle.y, progress)
    best = None
    taus = np.arange(0.0, horizon + 1e-9, cfg.dt)
    for o in scenario.obstacles:
        for tau in taus:
            ox, oy = o.position(clock + tau)
            if abs(ox - vehicle.x) + abs(oy - vehicle.y) > 2 * lookahead + 10:
                continue
            s_o, lat = line.project((ox, oy), s_ego - 5.0, s_ego + lookahead + 5.0)
            rel = o.heading - line.heading_at(s_o)
            ext_lat = abs(math.cos(rel)) * o.width / 2 + abs(math.sin(rel)) * o.length / 2
            ext_lon = abs(math.cos(rel)) * o.length / 2 + abs(math.sin(rel)) * o.width / 2
            if abs(lat) > ext_lat + cfg.vehicle_width / 2 + 0.5:
                continue
            ahead = s_o - s_ego
            if ahead < -ext_lon or ahead > lookahead:
                continue
            gap = max(0.0, ahead - ext_lon - cfg.vehicle_length / 2)
            if best is None or gap < best:
                best = gap
    return best


def step(state: EpisodeState, control) -> EpisodeState:
    """Advance one control period and log infractions."""
    if state.done:
        raise UsageError("episode already finished")
    ctrl = _as_control(control)
    cfg = state.config
    route = state.route
    v1 = advance(state.vehicle, ctrl, cfg)
    clock = state.clock + cfg.dt
    k = state.step_index + 1
    events = list(state.events)

    s, lat = project_progress(route.line, v1.x, v1.y, state.progress)
    progress = max(state.progress, min(s, route.length))
    if progress >= route.length - 1e-9:
        progress = route.length

    ego = _footprint(v1, cfg)
    contacts = set()
    reach = cfg.vehicle_length + 6.0
    for o in state.scenario.obstacles:
        ox, oy = o.position(clock)
        if abs(ox - v1.x) > reach or abs(oy - v1.y) > reach:
            continue
        if ego.intersects(shapely.Polygon(box_corners(*o.box(clock)))):
            contacts.add(o.ident)
            if o.ident not in state.contacts:
                events.append(Infraction(f"collision_{o.kind}", clock, k, o.ident))

    off_road = abs(lat) > route.half_width
    if off_road and not state.off_road:
        events.append(Infraction("off_road", clock, k))

    low = state.low_speed_steps
    if v1.speed < cfg.blocked_speed:
        gap = obstacle_gap(v1, clock, progress, state.scenario, cfg)
        low = 0 if gap is not None and gap < 15.0 else low + 1
    else:
        low = 0

    done, status = False, "running"
    if progress == route.length:
        done, status = True, "completed"
    elif low >= cfg.blocked_steps:
        events.append(Infraction("blocked", clock, k))
        done, status = True, "blocked"
    elif abs(lat) > cfg.deviation_limit:
        done, status = True, "deviated"
    elif k >= cfg.max_steps(route.length):
        done, status = True, "timeout"

    moved = math.hypot(v1.x - state.vehicle.x, v1.y - state.vehicle.y)
    return dataclasses.replace(
        state, vehicle=v1, clock=clock, step_index=k, progress=progress, lateral=lat,
        odometer=state.odometer + moved, events=events, off_road=off_road,
        contacts=frozenset(contacts), low_speed_steps=low, done=done, status=status)


# ------------------------------------------------------------------ episodes

@dataclass
class EpisodeResult:
    name: str
    seed: int
    route_length: float
    progress: float
    odometer: float
    events: list
    status: str
    trace: list = field(default_factory=list)

    @property
    def route_completion(self) -> float:
        return float(min(100.0, max(0.0, 100.0 * (self.progress / self.route_length))))


def trace_record(state: EpisodeState, control: Optional[ControlCommand], new_events) -> dict:
    v = state.vehicle
    rec = {
        "step": state.step_index, "clock": state.clock,
        "x": v.x, "y": v.y, "heading": v.heading, "speed": v.speed,
        "progress": state.progress,
        "infractions": [e.kind for e in new_events],
    }
    if control is not None:
        rec.update(steer=control.steer, throttle=control.throttle, brake=control.brake)
    return rec


def run_episode(scenario: Scenario, agent: Callable[[EpisodeState], ControlCommand],
                config: Optional[SimConfig] = None, record_trace: bool = True,
                on_step: Optional[Callable] = None) -> EpisodeResult:
    """Drive ``agent`` until the episode ends."""
    state = start_episode(scenario, config)
    if hasattr(agent, "reset"):
        agent.reset(scenario)
    trace = [trace_record(state, None, [])] if record_trace else []
    while not state.done:
        control = agent(state)
        nxt = step(state, control)
        if on_step is not None:
            on_step(state, control, nxt)
        if record_trace:
            trace.append(trace_record(nxt, _as_control(control), nxt.events[len(state.events):]))
        state = nxt
    return EpisodeResult(scenario.name, scenario.route.seed, scenario.route.length,
                         state.progress, state.odometer, list(state.events), state.status, trace)
