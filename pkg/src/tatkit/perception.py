"""LIDAR histogram pseudo-image and the feature-map encoder.

Grid convention (ego frame, x forward, y left): cell (row, col) holds the
points with ``row = floor((32 - x) / 0.125)`` and ``col = floor((16 - y) /
0.125)``, so row 0 is the far edge and col 0 the leftmost column.  Channel 0
takes points above the ground plane (z > 0), channel 1 the rest.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numgrid as ng
from .numgrid import DimensionError, Tensor

GRID = 256
CHANNELS = 2
RESOLUTION = 0.125
FRONT_RANGE = 32.0
SIDE_RANGE = 16.0
SAMPLE_SPACING = 0.25
OBSTACLE_Z = 1.0
ROAD_EDGE_Z = -0.1

BEV_MAGIC = b"BEVH1"


@dataclass
class PointCloud:
    points: np.ndarray  # (M, 3) x front, y left, z up

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class BevHistogram:
    grid: np.ndarray  # (H, W, D) counts
    resolution: float = RESOLUTION

    @property
    def total(self) -> int:
        return int(self.grid.sum())

    def to_sparse(self) -> tuple[np.ndarray, np.ndarray]:
        flat = self.grid.reshape(-1)
        idx = np.flatnonzero(flat).astype(np.uint32)
        return idx, np.minimum(flat[idx], 65535).astype(np.uint16)

    @classmethod
    def from_sparse(cls, idx, counts, shape=(GRID, GRID, CHANNELS)) -> "BevHistogram":
        grid = np.zeros(int(np.prod(shape)), dtype=np.int32)
        grid[np.asarray(idx, dtype=np.int64)] = counts
        return cls(grid.reshape(shape))


def cell_indices(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Row, column and channel of every point plus the in-bounds mask."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rows = np.floor((FRONT_RANGE - pts[:, 0]) / RESOLUTION)
    cols = np.floor((SIDE_RANGE - pts[:, 1]) / RESOLUTION)
    keep = (rows >= 0) & (rows < GRID) & (cols >= 0) & (cols < GRID)
    chan = np.where(pts[:, 2] > 0.0, 0, 1)
    return rows.astype(np.int64), cols.astype(np.int64), chan, keep


def rasterize(cloud: PointCloud) -> BevHistogram:
    """Bin points into the 2-channel histogram; out-of-range points are dropped."""
    rows, cols, chan, keep = cell_indices(cloud.points)
    flat = (rows[keep] * GRID + cols[keep]) * CHANNELS + chan[keep]
    counts = np.bincount(flat, minlength=GRID * GRID * CHANNELS).astype(np.int32)
    return BevHistogram(counts.reshape(GRID, GRID, CHANNELS))


def write_histogram(path, hist: BevHistogram) -> None:
    """Little-endian dump: magic, H, W, D (u32), resolution (f64), u16 counts."""
    h, w, d = hist.grid.shape
    with open(path, "wb") as fh:
        fh.write(BEV_MAGIC)
        fh.write(struct.pack("<IIId", h, w, d, hist.resolution))
        fh.write(np.minimum(hist.grid, 65535).astype("<u2").tobytes())


def read_histogram(path) -> BevHistogram:
    raw = Path(path).read_bytes()
    if raw[:5] != BEV_MAGIC:
        raise ValueError(f"{path}: not a BEVH1 histogram dump")
    h, w, d, res = struct.unpack_from("<IIId", raw, 5)
    off = 5 + struct.calcsize("<IIId")
    counts = np.frombuffer(raw, dtype="<u2", count=h * w * d, offset=off)
    return BevHistogram(counts.astype(np.int32).reshape(h, w, d), res)


# ------------------------------------------------------------- point sampling

def sample_polyline(vertices: np.ndarray, spacing: float = SAMPLE_SPACING,
                    phase: float = 0.0, closed: bool = False) -> np.ndarray:
    """Points every ``spacing`` metres of arc length, starting at ``phase``."""
    v = np.asarray(vertices, dtype=np.float64)
    if closed:
        v = np.vstack([v, v[:1]])
    if len(v) < 2:
        return np.zeros((0, 2))
    seg = np.diff(v, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    total = cum[-1]
    if closed:
        n = int(round(total / spacing))
        s = phase + spacing * np.arange(n)
        s = np.mod(s, total)
    else:
        s = np.arange(phase, total + 1e-12, spacing)
    i = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    t = (s - cum[i]) / np.where(seglen[i] > 0, seglen[i], 1.0)
    return v[i] + seg[i] * t[:, None]


def box_corners(cx: float, cy: float, heading: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def world_to_ego(points: np.ndarray, x: float, y: float, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    d = np.asarray(points, dtype=np.float64) - np.array([x, y])
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)


def synth_cloud(scene, seed: int = 0) -> PointCloud:
    """Stand-in LIDAR sweep of a scene, in the ego frame.

    ``scene`` supplies ``ego_pose() -> (x, y, heading)``, ``edge_points``
    (road boundaries pre-sampled in the world frame) and ``obstacle_boxes()
    -> [(cx, cy, heading, length, width), ...]``.  Obstacle outlines are
    sampled every 0.25 m from a seed-dependent starting phase.
    """
    x, y, yaw = scene.ego_pose()
    parts = []
    edges = getattr(scene, "edge_points", None)
    if edges is not None and len(edges):
        near = np.abs(edges[:, 0] - x) + np.abs(edges[:, 1] - y) < 2 * (FRONT_RANGE + SIDE_RANGE)
        if np.any(near):
            ego = world_to_ego(edges[near], x, y, yaw)
            parts.append(np.column_stack([ego, np.full(len(ego), ROAD_EDGE_Z)]))
    boxes = list(scene.obstacle_boxes())
    if boxes:
        rng = np.random.default_rng(seed)
        for box in boxes:
            phase = float(rng.uniform(0.0, SAMPLE_SPACING))
            outline = sample_polyline(box_corners(*box), SAMPLE_SPACING, phase, closed=True)
            ego = world_to_ego(outline, x, y, yaw)
            parts.append(np.column_stack([ego, np.full(len(ego), OBSTACLE_Z)]))
    if not parts:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(np.vstack(parts))


# -------------------------------------------------------------------- encoder

@dataclass
class EncoderConfig:
    """Strided stages; kernel size equals stride (non-overlapping patches)."""

    input_size: int = GRID
    in_channels: int = CHANNELS
    strides: Sequence[int] = (4, 4, 2)
    channels: Sequence[int] = (16, 32, 64)  # the last entry must equal decoder d_model
    activation: str = "leaky_relu"
    count_clip: float = 5.0
    dtype: str = "float64"

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.strides) != len(self.channels):
            raise ValueError("strides and channels must have the same length")
        if self.input_size % self.total_stride:
            raise ValueError(f"input {self.input_size} not divisible by stride {self.total_stride}")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def output_size(self) -> int:
        return self.input_size // self.total_stride

    @property
    def width(self) -> int:
        return self.channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        d["channels"] = list(self.channels)
        return d


class BevEncoder:
    """Histogram (B, H, W, 2) -> feature map F (B, H0, W0, width).

    There is no pooling or flattening: the full spatial map is the output.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0, prefix: str = "encoder"):
        self.config = config
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        cin = config.in_channels
        for i, (k, cout) in enumerate(zip(config.strides, config.channels)):
            fan_in = k * k * cin
            bound = 1.0 / math.sqrt(fan_in)
            self.params[f"{prefix}.stage{i}.weight"] = Tensor(
                rng.uniform(-bound, bound, (fan_in, cout)).astype(config.dtype), requires_grad=True)
            self.params[f"{prefix}.stage{i}.bias"] = Tensor(
                np.zeros(cout, dtype=config.dtype), requires_grad=True)
            cin = cout

    def normalize(self, counts: np.ndarray) -> np.ndarray:
        clip = self.config.count_clip
        x = np.asarray(counts, dtype=self.config.dtype)
        return np.minimum(x, clip) / clip if clip > 0 else x

    def encode(self, hist) -> Tensor:
        c = self.config
        if isinstance(hist, BevHistogram):
            hist = hist.grid[None]
        data = hist.data if isinstance(hist, Tensor) else self.normalize(hist)
        if data.ndim == 3:
            data = data[None]
        if data.shape[1:] != (c.input_size, c.input_size, c.in_channels):
            raise DimensionError(
                f"encoder expects (B, {c.input_size}, {c.input_size}, {c.in_channels}), got {data.shape}")
        x = Tensor(data) if not isinstance(hist, Tensor) else hist
        act = ng.ACTIVATIONS[c.activation]
        last = len(c.strides) - 1
        for i, k in enumerate(c.strides):
            x = ng.space_to_depth(x, k)
            x = ng.linear(x, self.params[f"{self.prefix}.stage{i}.weight"],
                          self.params[f"{self.prefix}.stage{i}.bias"])
            if i < last:
                x = act(x)
        return x
