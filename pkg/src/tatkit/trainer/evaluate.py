"""Open-loop waypoint error and closed-loop driving evaluation."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..perception import CHANNELS, GRID
from ..pilot import PidState, PilotConfig, waypoints_to_control
from ..simworld import (MetricsReport, Scenario, SimConfig, expert_policy, run_episode, score)
from .dataset import Dataset, observe
from .models import Policy


def waypoint_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Mean Euclidean error per waypoint index over the batch."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=0)


def error_slope(errors: Sequence[float]) -> float:
    """Least-squares slope of error against waypoint index."""
    e = np.asarray(errors, dtype=np.float64)
    return float(np.polyfit(np.arange(1, len(e) + 1), e, 1)[0])


def evaluate_openloop(model, dataset: Dataset, batch_size: int = 64) -> np.ndarray:
    """Per-index mean L2 error of ``model.predict(hist, target)`` on ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("open-loop evaluation needs at least one sample")
    dtype = getattr(getattr(getattr(model, "config", None), "encoder", None), "dtype", "float64")
    total = None
    for k in range(0, len(dataset), batch_size):
        idx = list(range(k, min(k + batch_size, len(dataset))))
        hist, target, gt = dataset.batch(idx, dtype=dtype)
        err = np.linalg.norm(np.asarray(model.predict(hist, target), np.float64)
                             - gt.astype(np.float64), axis=-1).sum(axis=0)
        total = err if total is None else total + err
    return total / len(dataset)


class PolicyAgent:
    """Perception -> policy -> PID pilot, as a ``run_episode`` agent."""

    def __init__(self, policy: Policy, pilot: Optional[PilotConfig] = None, clip: float = 5.0):
        self.policy = policy
        self.pilot_config = pilot or PilotConfig.tracking()
        self.clip = clip
        self.pid = PidState(self.pilot_config)
        self.last_waypoints = None

    def reset(self, scenario) -> None:
        self.pid = PidState(self.pilot_config)

    def observe(self, state) -> tuple[np.ndarray, np.ndarray]:
        idx, counts = observe(state)
        dtype = self.policy.config.encoder.dtype
        flat = np.zeros(GRID * GRID * CHANNELS, dtype=dtype)
        flat[idx.astype(np.int64)] = np.minimum(counts, self.clip) / self.clip
        target = state.target_point_ego().astype(dtype)
        return flat.reshape(1, GRID, GRID, CHANNELS), target[None]

    def __call__(self, state):
        hist, target = self.observe(state)
        w = self.policy.predict(hist, target)[0]
        self.last_waypoints = w
        return waypoints_to_control(w, state.vehicle.speed, self.pid)


class OracleAgent:
    """Expert labels in place of predictions: the harness upper bound."""

    def __init__(self, pilot: Optional[PilotConfig] = None, n_waypoints: int = 4):
        self.pilot_config = pilot or PilotConfig.tracking()
        self.n_waypoints = n_waypoints
        self.pid = PidState(self.pilot_config)

    def reset(self, scenario) -> None:
        self.pid = PidState(self.pilot_config)

    def __call__(self, state):
        w, _ = expert_policy(state, self.n_waypoints)
        return waypoints_to_control(w, state.vehicle.speed, self.pid)


def _episode_job(args):
    agent, scenario, sim = args
    return run_episode(scenario, agent, sim)


def run_agents(agent, scenarios: Sequence[Scenario], sim: Optional[SimConfig] = None,
               jobs: int = 1):
    work = [(agent, sc, sim) for sc in scenarios]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_episode_job, work, chunksize=1))
    return [_episode_job(w) for w in work]


def evaluate_closedloop(policy: Optional[Policy], scenarios: Sequence[Scenario],
                        sim: Optional[SimConfig] = None, pilot: Optional[PilotConfig] = None,
                        jobs: int = 1, trace_dir=None, oracle: bool = False):
    """Drive every scenario; returns the report and the raw episodes.

    ``oracle=True`` (or ``policy=None``) feeds the expert's labels to the
    pilot instead of network predictions.
    """
    agent = OracleAgent(pilot) if oracle or policy is None else PolicyAgent(policy, pilot)
    episodes = run_agents(agent, scenarios, sim, jobs)
    episodes.sort(key=lambda e: (e.seed, e.name))
    report = score(episodes, (sim or SimConfig()).penalties)
    if trace_dir is not None:
        write_traces(trace_dir, episodes)
    return report, episodes


def write_traces(out, episodes) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for ep in episodes:
        with open(out / f"trace-{ep.name}.jsonl", "w") as fh:
            for rec in ep.trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
