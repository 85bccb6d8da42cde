"""Expert rollouts to an on-disk imitation dataset.

Shard layout (little-endian): magic ``TATD1``, u32 record count, then per
record a u32 byte length followed by

    i64 route seed, i32 episode, i32 step, u32 Z,
    f64[2] target-point, f64[Z, 2] waypoints,
    u32 nnz, u32[nnz] flat histogram index, u16[nnz] counts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ..perception import CHANNELS, GRID, rasterize, synth_cloud
from ..pilot import ControlCommand
from ..simworld import (ExpertConfig, Scenario, SimConfig, expert_control, rollout_labels,
                        start_episode, step)

log = logging.getLogger(__name__)

SHARD_MAGIC = b"TATD1"
MANIFEST = "manifest.json"
FORMAT_VERSION = 1
LABEL_BOUND = 64.0
_HEAD = struct.Struct("<qiiI")


@dataclass
class Sample:
    hist_index: np.ndarray  # u32 flat indices into the (256, 256, 2) grid
    hist_counts: np.ndarray  # u16
    target: np.ndarray  # (2,) ego frame
    waypoints: np.ndarray  # (Z, 2) ego frame
    route_seed: int
    episode: int
    step: int

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64).reshape(2)
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.waypoints)) or np.any(np.abs(self.waypoints) > LABEL_BOUND):
            raise ValueError(f"waypoint label outside +-{LABEL_BOUND} m or non-finite "
                             f"(route {self.route_seed}, step {self.step})")

    def dense(self) -> np.ndarray:
        grid = np.zeros(GRID * GRID * CHANNELS, dtype=np.int32)
        grid[self.hist_index.astype(np.int64)] = self.hist_counts
        return grid.reshape(GRID, GRID, CHANNELS)

    def encode(self) -> bytes:
        z = len(self.waypoints)
        parts = [
            _HEAD.pack(self.route_seed, self.episode, self.step, z),
            self.target.astype("<f8").tobytes(),
            self.waypoints.astype("<f8").tobytes(),
            struct.pack("<I", len(self.hist_index)),
            self.hist_index.astype("<u4").tobytes(),
            self.hist_counts.astype("<u2").tobytes(),
        ]
        body = b"".join(parts)
        return struct.pack("<I", len(body)) + body

    @classmethod
    def decode(cls, buf: bytes, offset: int = 0) -> tuple["Sample", int]:
        (size,) = struct.unpack_from("<I", buf, offset)
        o = offset + 4
        seed, episode, step_, z = _HEAD.unpack_from(buf, o)
        o += _HEAD.size
        target = np.frombuffer(buf, "<f8", 2, o)
        o += 16
        wp = np.frombuffer(buf, "<f8", 2 * z, o).reshape(z, 2)
        o += 16 * z
        (nnz,) = struct.unpack_from("<I", buf, o)
        o += 4
        idx = np.frombuffer(buf, "<u4", nnz, o).copy()
        o += 4 * nnz
        counts = np.frombuffer(buf, "<u2", nnz, o).copy()
        o += 2 * nnz
        if o != offset + 4 + size:
            raise ValueError("corrupt TATD1 record: length prefix does not match contents")
        return cls(idx, counts, target.copy(), wp.copy(), seed, episode, step_), o


def write_shard(path, samples: Sequence[Sample]) -> None:
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<I", len(samples)))
        for s in samples:
            fh.write(s.encode())


def read_shard(path) -> list[Sample]:
    buf = Path(path).read_bytes()
    if buf[:5] != SHARD_MAGIC:
        raise ValueError(f"{path}: not a TATD1 shard")
    (n,) = struct.unpack_from("<I", buf, 5)
    o = 9
    out = []
    for _ in range(n):
        s, o = Sample.decode(buf, o)
        out.append(s)
    if o != len(buf):
        raise ValueError(f"{path}: trailing bytes after {n} records")
    return out


# ---------------------------------------------------------------- collection

@dataclass
class CollectConfig:
    n_waypoints: int = 4
    steer_noise: float = 0.1  # std of the perturbation added to the executed steer
    noise_every: int = 1
    shard_size: int = 4096
    sim: SimConfig = field(default_factory=SimConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def cloud_seed(route_seed: int, step_index: int) -> int:
    return (route_seed * 1_000_003 + step_index) % (2**63)


def observe(state, seed: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Sparse histogram of the synthetic sweep at ``state``."""
    s = cloud_seed(state.route.seed, state.step_index) if seed is None else seed
    return rasterize(synth_cloud(state, s)).to_sparse()


@dataclass
class RolloutResult:
    seed: int
    name: str
    samples: list
    discarded: Optional[str] = None


def rollout(scenario: Scenario, episode: int, config: CollectConfig) -> RolloutResult:
    """Drive the expert with steering noise, labelling each visited state."""
    rng = np.random.default_rng([scenario.route.seed, 0xDA27])
    state = start_episode(scenario, config.sim)
    samples = []
    while not state.done:
        idx, counts = observe(state)
        wp = rollout_labels(state.vehicle, state.clock, state.progress, scenario,
                            config.n_waypoints, config.sim, config.expert)
        samples.append(Sample(idx, counts, state.target_point_ego(), wp,
                              scenario.route.seed, episode, state.step_index))
        ctrl, _ = expert_control(state.vehicle, state.clock, state.progress, scenario,
                                 config.sim, config.expert)
        noise = rng.normal(0.0, config.steer_noise) if config.steer_noise > 0 else 0.0
        if config.noise_every > 1 and state.step_index % config.noise_every:
            noise = 0.0
        state = step(state, ControlCommand(ctrl.steer + noise, ctrl.throttle, ctrl.brake))
    if state.events:
        reason = ",".join(sorted({e.kind for e in state.events}))
        return RolloutResult(scenario.route.seed, scenario.name, [], f"infraction: {reason}")
    if state.status != "completed":
        return RolloutResult(scenario.route.seed, scenario.name, [], f"status: {state.status}")
    return RolloutResult(scenario.route.seed, scenario.name, samples)


def _rollout_job(args):
    return rollout(*args)


def collect(scenarios: Sequence[Scenario], out, config: Optional[CollectConfig] = None,
            jobs: int = 1) -> "Dataset":
    """Roll the expert on every scenario and write shards plus a manifest."""
    config = config or CollectConfig()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    work = [(sc, i, config) for i, sc in enumerate(scenarios)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_rollout_job, work, chunksize=1))
    else:
        results = [_rollout_job(w) for w in work]

    kept, routes, discarded = [], [], []
    for sc, res in zip(scenarios, results):
        if res.discarded:
            log.warning("discarding route %s (seed %d): %s", res.name, res.seed, res.discarded)
            discarded.append({"seed": res.seed, "name": res.name, "reason": res.discarded})
            continue
        kept.extend(res.samples)
        routes.append({"seed": res.seed, "name": res.name, "samples": len(res.samples),
                       "length": round(sc.route.length, 6), "decisions": sc.route.n_decisions,
                       "obstacles": len(sc.obstacles)})

    shards = []
    for k in range(0, len(kept), config.shard_size):
        name = f"shard-{k // config.shard_size:04d}.tatd"
        write_shard(out / name, kept[k:k + config.shard_size])
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        shards.append({"file": name, "samples": len(kept[k:k + config.shard_size]),
                       "sha256": digest})
    cfg = config.to_dict()
    manifest = {
        "format": "TATD1", "version": FORMAT_VERSION,
        "n_samples": len(kept), "n_routes": len(routes), "n_waypoints": config.n_waypoints,
        "seeds": [r["seed"] for r in routes], "routes": routes, "discarded": discarded,
        "shards": shards, "config": cfg, "config_hash": config_hash(cfg),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return Dataset(kept, manifest)


# ------------------------------------------------------------------- dataset

class Dataset:
    """In-memory samples with batched dense histograms."""

    def __init__(self, samples: Sequence[Sample], manifest: Optional[dict] = None):
        self.samples = list(samples)
        self.manifest = manifest or {}

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        mf = path / MANIFEST
        if not mf.exists():
            raise FileNotFoundError(f"no dataset manifest at {mf}")
        manifest = json.loads(mf.read_text())
        samples = []
        for shard in manifest["shards"]:
            samples.extend(read_shard(path / shard["file"]))
        if len(samples) != manifest["n_samples"]:
            raise ValueError(f"{path}: manifest lists {manifest['n_samples']} samples, "
                             f"shards hold {len(samples)}")
        return cls(samples, manifest)

    @property
    def route_seeds(self) -> list[int]:
        return sorted({s.route_seed for s in self.samples})

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.manifest)

    def split(self, val_fraction: float = 0.1, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Hold out whole routes, never individual timesteps."""
        seeds = np.array(self.route_seeds)
        n_val = int(math.ceil(val_fraction * len(seeds))) if val_fraction > 0 else 0
        if len(seeds) > 1:
            n_val = min(n_val, len(seeds) - 1)
        else:
            n_val = 0
        held = set(np.random.default_rng([seed, 0x5A1]).permutation(seeds)[:n_val].tolist())
        train = [i for i, s in enumerate(self.samples) if s.route_seed not in held]
        val = [i for i, s in enumerate(self.samples) if s.route_seed in held]
        return self.subset(train), self.subset(val)

    def batch(self, indices: Sequence[int], dtype="float32", clip: float = 5.0):
        """Normalised dense histograms, targets and labels for ``indices``."""
        n = len(indices)
        flat = np.zeros((n, GRID * GRID * CHANNELS), dtype=dtype)
        for row, i in enumerate(indices):
            s = self.samples[i]
            flat[row, s.hist_index.astype(np.int64)] = np.minimum(s.hist_counts, clip) / clip
        targets = np.stack([self.samples[i].target for i in indices]).astype(dtype)
        labels = np.stack([self.samples[i].waypoints for i in indices]).astype(dtype)
        return flat.reshape(n, GRID, GRID, CHANNELS), targets, labels
