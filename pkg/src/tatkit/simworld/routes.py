"""Procedural routes, road layout and obstacle placement.

A route is a chain of blocks.  Each block is a straight approach, an
intersection and a short exit straight; the intersection offers left,
straight and right branches and only the block's target-point (placed at
the block end) tells which one the route takes.  Relative heading stays
within +-90 degrees of the start, so the route never folds back on itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..perception import sample_polyline

SHORT = (100.0, 500.0)
LONG = (1000.0, 2000.0)
LENGTH_CLASSES = {"short": SHORT, "long": LONG}
MAX_BLOCK = 150.0
ARC_STEP = 0.5
STUB_LENGTH = 30.0


class Polyline:
    """Dense polyline with arc-length lookup and windowed projection."""

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=np.float64)
        self.vertices = v
        seg = np.diff(v, axis=0)
        self.seg = seg
        self.seglen = np.hypot(seg[:, 0], seg[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seglen)])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        """Position at arc-length ``s``; beyond the ends the end segments extend."""
        i = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg) - 1))
        t = (s - self.cum[i]) / self.seglen[i]
        return self.vertices[i] + self.seg[i] * t

    def heading_at(self, s: float) -> float:
        i = int(np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg) - 1))
        return math.atan2(self.seg[i, 1], self.seg[i, 0])

    def project(self, p, s_lo: float = -np.inf, s_hi: float = np.inf) -> tuple[float, float]:
        """Closest point among segments overlapping [s_lo, s_hi].

        The first and last segments are treated as rays, so the arc-length can
        fall outside [0, length] for points beyond the ends.

        Returns (arc-length, signed lateral offset; positive to the left).
        """
        n = len(self.seg)
        i0 = min(max(int(np.searchsorted(self.cum, s_lo, side="right")) - 1, 0), n - 1)
        i1 = min(int(np.searchsorted(self.cum, s_hi, side="left")), n)
        i1 = max(i1, i0 + 1)
        a = self.vertices[i0:i1]
        d = self.seg[i0:i1]
        ln = self.seglen[i0:i1]
        rel = np.asarray(p, dtype=np.float64) - a
        lo = np.zeros(len(d))
        hi = np.ones(len(d))
        if i0 == 0:
            lo[0] = -np.inf  # the end segments extend past the polyline ends
        if i1 == n:
            hi[-1] = np.inf
        t = np.clip((rel * d).sum(axis=1) / (ln * ln), lo, hi)
        foot = a + d * t[:, None]
        dist = np.hypot(*(np.asarray(p) - foot).T)
        k = int(np.argmin(dist))
        s = float(self.cum[i0 + k] + t[k] * ln[k])
        cross = d[k, 0] * rel[k, 1] - d[k, 1] * rel[k, 0]
        return s, float(math.copysign(dist[k], cross) if dist[k] > 0 else 0.0)

    def max_curvature(self, s0: float, s1: float) -> float:
        i0 = max(int(np.searchsorted(self.cum, s0, side="right")) - 1, 0)
        i1 = min(int(np.searchsorted(self.cum, s1, side="right")), len(self.seg) - 1)
        if i1 <= i0:
            return 0.0
        h = np.arctan2(self.seg[i0:i1 + 1, 1], self.seg[i0:i1 + 1, 0])
        dh = np.abs(np.angle(np.exp(1j * np.diff(h))))
        return float(np.max(dh / self.seglen[i0 + 1:i1 + 1])) if len(dh) else 0.0


@dataclass
class Intersection:
    center: tuple[float, float]
    heading_in: float
    radius: float
    decision: str  # "left" | "straight" | "right"
    s_entry: float
    s_exit: float


@dataclass
class RouteSpec:
    seed: int
    length_class: str
    centerline: np.ndarray  # (M, 2) world frame
    target_points: np.ndarray  # (G, 2)
    target_s: np.ndarray  # (G,) arc-length of each target-point
    intersections: list[Intersection]
    roads: list[np.ndarray]  # drivable pieces (route and side branches) as polylines
    half_width: float = 2.0
    edge_offset: float = 3.0
    _line: Optional[Polyline] = field(default=None, repr=False, compare=False)
    _edges: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def line(self) -> Polyline:
        if self._line is None:
            self._line = Polyline(self.centerline)
        return self._line

    @property
    def length(self) -> float:
        return self.line.length

    @property
    def n_decisions(self) -> int:
        return len(self.intersections)

    @property
    def edge_points(self) -> np.ndarray:
        """Road boundaries sampled every 0.25 m in the world frame (cached)."""
        if self._edges is None:
            pts = [np.zeros((0, 2))]
            for road in self.roads:
                for side in (1.0, -1.0):
                    pts.append(sample_polyline(offset_polyline(road, side * self.edge_offset)))
            self._edges = np.vstack(pts)
        return self._edges

    def next_target_index(self, progress: float, margin: float = 5.0) -> int:
        ahead = np.flatnonzero(self.target_s > progress + margin)
        return int(ahead[0]) if len(ahead) else len(self.target_s) - 1

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "length_class": self.length_class,
            "half_width": self.half_width,
            "edge_offset": self.edge_offset,
            "centerline": self.centerline.tolist(),
            "target_points": self.target_points.tolist(),
            "target_s": self.target_s.tolist(),
            "intersections": [
                {"center": list(i.center), "heading_in": i.heading_in, "radius": i.radius,
                 "decision": i.decision, "s_entry": i.s_entry, "s_exit": i.s_exit}
                for i in self.intersections
            ],
            "roads": [r.tolist() for r in self.roads],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RouteSpec":
        return cls(
            seed=int(d["seed"]),
            length_class=d["length_class"],
            centerline=np.asarray(d["centerline"], dtype=np.float64),
            target_points=np.asarray(d["target_points"], dtype=np.float64),
            target_s=np.asarray(d["target_s"], dtype=np.float64),
            intersections=[Intersection(tuple(i["center"]), i["heading_in"], i["radius"],
                                        i["decision"], i["s_entry"], i["s_exit"])
                           for i in d["intersections"]],
            roads=[np.asarray(r, dtype=np.float64) for r in d["roads"]],
            half_width=float(d["half_width"]),
            edge_offset=float(d["edge_offset"]),
        )


def offset_polyline(vertices: np.ndarray, offset: float) -> np.ndarray:
    """Shift each vertex sideways (left positive) by ``offset``."""
    v = np.asarray(vertices, dtype=np.float64)
    d = np.gradient(v, axis=0)
    n = np.stack([-d[:, 1], d[:, 0]], axis=1)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return v + offset * n


def _straight(p, heading, length, step=ARC_STEP):
    n = max(int(math.ceil(length / step)), 1)
    s = np.linspace(0.0, length, n + 1)[1:]
    return p + np.outer(s, [math.cos(heading), math.sin(heading)])


def _arc(p, heading, radius, turn, step=ARC_STEP):
    """Quarter turn; ``turn`` is +1 for left, -1 for right."""
    length = radius * math.pi / 2
    n = max(int(math.ceil(length / step)), 1)
    phi = np.linspace(0.0, math.pi / 2, n + 1)[1:]
    left = np.array([-math.sin(heading), math.cos(heading)])
    fwd = np.array([math.cos(heading), math.sin(heading)])
    center = p + turn * radius * left
    # position relative to arc centre rotates by turn*phi
    return (center
            + np.outer(radius * np.sin(phi), fwd)
            - np.outer(turn * radius * np.cos(phi), left))


def generate_route(seed: int, length_class: str = "short", half_width: float = 2.0,
                   edge_offset: float = 3.0) -> RouteSpec:
    """Deterministic route for ``seed``; arc length lies in the class band."""
    if length_class not in LENGTH_CLASSES:
        raise ValueError(f"length_class must be one of {sorted(LENGTH_CLASSES)}")
    rng = np.random.default_rng([seed, 0x7A7])
    lo, hi = LENGTH_CLASSES[length_class]
    # half-metre margin absorbs the chord shortfall of the discretised arcs
    total = float(rng.uniform(lo + 0.5, hi - 0.5))
    n_blocks = int(math.ceil(total / MAX_BLOCK))
    block = total / n_blocks

    pts = [np.zeros((1, 2))]
    pos = np.zeros(2)
    heading = 0.0
    rel = 0  # relative heading in quarter turns, kept in {-1, 0, 1}
    s = 0.0
    targets, target_s, inters = [], [], []
    roads: list[np.ndarray] = []
    road_start = pos.copy()
    road_pts = [pos[None]]

    for _ in range(n_blocks):
        options = ["straight"] + (["left"] if rel < 1 else []) + (["right"] if rel > -1 else [])
        decision = options[int(rng.integers(len(options)))]
        radius = float(rng.uniform(8.0, 20.0))
        exit_len = float(rng.uniform(8.0, 20.0))
        inter_len = 2 * radius if decision == "straight" else radius * math.pi / 2
        approach = block - inter_len - exit_len

        seg = _straight(pos, heading, approach)
        pts.append(seg)
        road_pts.append(seg)
        pos = seg[-1]
        s += approach
        s_entry = s
        fwd = np.array([math.cos(heading), math.sin(heading)])
        left = np.array([-math.sin(heading), math.cos(heading)])
        center = pos + radius * fwd
        heading_in = float(heading)
        roads.append(np.vstack(road_pts))

        if decision == "straight":
            seg = _straight(pos, heading, inter_len)
        else:
            turn = 1 if decision == "left" else -1
            seg = _arc(pos, heading, radius, turn)
            heading += turn * math.pi / 2
            rel += turn
        pts.append(seg)
        pos = seg[-1]
        s += inter_len
        inters.append(Intersection((float(center[0]), float(center[1])), heading_in,
                                   radius, decision, s_entry, s))
        # side branches not taken, as stubs leaving the intersection box
        for branch, direction in (("straight", fwd), ("left", left), ("right", -left)):
            if branch == decision:
                continue
            start = center + radius * direction
            stub = np.vstack([start, start + STUB_LENGTH * direction])
            roads.append(_densify(stub))

        road_pts = [pos[None]]
        seg = _straight(pos, heading, exit_len)
        pts.append(seg)
        road_pts.append(seg)
        pos = seg[-1]
        s += exit_len
        targets.append(pos.copy())
        target_s.append(s)

    road_pts.append(_straight(pos, heading, STUB_LENGTH))
    roads.append(np.vstack(road_pts))
    back = np.vstack([_straight(np.zeros(2), math.pi, STUB_LENGTH)[::-1], np.zeros((1, 2))])
    roads.append(back)

    centerline = np.vstack(pts)
    route = RouteSpec(seed, length_class, centerline, np.asarray(targets), np.zeros(len(targets)),
                      inters, roads, half_width, edge_offset)
    # recompute target arc-lengths on the final polyline so they are exact vertices
    line = route.line
    idx = [int(np.argmin(np.hypot(*(centerline - t).T))) for t in route.target_points]
    route.target_points = centerline[idx].copy()
    route.target_s = line.cum[idx].copy()
    for it in inters:
        it.s_entry = float(line.cum[int(np.argmin(np.abs(line.cum - it.s_entry)))])
        it.s_exit = float(line.cum[int(np.argmin(np.abs(line.cum - it.s_exit)))])
    return route


def _densify(poly: np.ndarray, step: float = ARC_STEP) -> np.ndarray:
    a, b = poly[0], poly[-1]
    n = max(int(math.ceil(np.linalg.norm(b - a) / step)), 1)
    return a + np.outer(np.linspace(0, 1, n + 1), b - a)


# ------------------------------------------------------------------ obstacles

@dataclass
class Obstacle:
    """Box moving at constant velocity (speed 0 for static layout objects)."""

    ident: int
    x: float
    y: float
    heading: float
    length: float
    width: float
    speed: float = 0.0

    @property
    def kind(self) -> str:
        return "vehicle" if self.speed > 0 else "layout"

    def position(self, t: float) -> tuple[float, float]:
        return (self.x + self.speed * t * math.cos(self.heading),
                self.y + self.speed * t * math.sin(self.heading))

    def box(self, t: float) -> tuple[float, float, float, float, float]:
        x, y = self.position(t)
        return (x, y, self.heading, self.length, self.width)

    def to_dict(self) -> dict:
        return {"ident": self.ident, "x": self.x, "y": self.y, "heading": self.heading,
                "length": self.length, "width": self.width, "speed": self.speed}


@dataclass
class Scenario:
    route: RouteSpec
    obstacles: list[Obstacle] = field(default_factory=list)
    name: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "route": self.route.to_dict(),
                "obstacles": [o.to_dict() for o in self.obstacles]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(RouteSpec.from_dict(d["route"]), [Obstacle(**o) for o in d["obstacles"]],
                   d.get("name", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


def populate_obstacles(route: RouteSpec, seed: int, cruise_speed: float = 6.0,
                       crossing_prob: float = 0.6, parked_per_100m: float = 1.0) -> list[Obstacle]:
    """Crossing traffic at intersections and parked boxes beside the road."""
    rng = np.random.default_rng([seed, 0x0B5])
    obstacles: list[Obstacle] = []
    for it in route.intersections:
        if rng.uniform() >= crossing_prob:
            continue
        speed = float(rng.uniform(4.0, 7.0))
        lead = float(rng.uniform(-1.0, 1.5))
        t_cross = max(it.s_entry / cruise_speed + lead, 0.5)
        side = 1 if rng.uniform() < 0.5 else -1
        heading = it.heading_in + side * math.pi / 2
        cx, cy = it.center
        x = cx - speed * t_cross * math.cos(heading)
        y = cy - speed * t_cross * math.sin(heading)
        obstacles.append(Obstacle(len(obstacles), x, y, heading, 4.5, 1.8, speed))
    line = route.line
    n_parked = int(rng.poisson(parked_per_100m * route.length / 100.0))
    for _ in range(n_parked):
        s = float(rng.uniform(15.0, route.length - 5.0))
        if any(it.s_entry - 12 < s < it.s_exit + 5 for it in route.intersections):
            continue
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        h = line.heading_at(s)
        p = line.point_at(s)
        lat = side * float(rng.uniform(4.0, 4.6))
        x = p[0] - lat * math.sin(h)
        y = p[1] + lat * math.cos(h)
        length = float(rng.uniform(2.0, 4.5))
        obstacles.append(Obstacle(len(obstacles), x, y, h, length, 2.0, 0.0))
    return obstacles


def generate_scenario(seed: int, length_class: str = "short", obstacles: bool = False,
                      **route_kw) -> Scenario:
    route = generate_route(seed, length_class, **route_kw)
    obs = populate_obstacles(route, seed) if obstacles else []
    return Scenario(route, obs, name=f"{length_class}-{seed}{'-obs' if obstacles else ''}")
