"""Imitation training: AdamW on the mean L2 waypoint loss under a step schedule."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .. import numgrid as ng
from ..numgrid import UsageError
from .dataset import Dataset
from .models import VARIANTS, Policy, PolicyConfig

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    milestones: Sequence[int] = (40, 70)
    gamma: float = 0.1
    batch_size: int = 32
    weight_decay: float = 0.01
    seed: int = 0
    variant: str = "tat_ct"
    val_fraction: float = 0.1
    max_steps: Optional[int] = None  # stop early after this many optimizer steps

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def lr_at(self, epoch: int) -> float:
        return ng.step_lr(epoch, self.learning_rate, self.milestones, self.gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class TrainResult:
    policy: Policy
    history: list = field(default_factory=list)
    steps: int = 0
    step_losses: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1]["train_loss"] if self.history else float("nan")


def first_nonfinite_grad(params) -> Optional[str]:
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return name
    return None


def batch_loss(policy: Policy, data: Dataset, idx, dtype: str) -> float:
    hist, target, gt = data.batch(idx, dtype=dtype)
    return float(policy.loss(hist, target, gt).item())


def evaluate_loss(policy: Policy, data: Dataset, batch_size: int = 64) -> Optional[float]:
    """Mean loss over a dataset (batched, sample-weighted)."""
    if len(data) == 0:
        return None
    dtype = policy.config.encoder.dtype
    total = 0.0
    for k in range(0, len(data), batch_size):
        idx = list(range(k, min(k + batch_size, len(data))))
        total += batch_loss(policy, data, idx, dtype) * len(idx)
    return total / len(data)


def train(config: TrainConfig, dataset: Dataset, policy_config: Optional[PolicyConfig] = None,
          validation: Optional[Dataset] = None, on_epoch: Optional[Callable] = None,
          policy: Optional[Policy] = None) -> TrainResult:
    """Fit a policy; ``validation`` defaults to a 10% hold-out of routes.

    Pass ``validation=Dataset([])`` to train on everything.
    """
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    if validation is None:
        dataset, validation = dataset.split(config.val_fraction, config.seed)
    if policy is None:
        pc = policy_config or PolicyConfig()
        pc = PolicyConfig(**{**pc.to_dict(), "variant": config.variant, "seed": config.seed})
        policy = Policy(pc)
    dtype = policy.config.encoder.dtype
    opt = ng.AdamW(policy.params, lr=config.learning_rate, weight_decay=config.weight_decay)
    result = TrainResult(policy)
    n = len(dataset)
    graph = ng.Graph()
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        t0 = time.perf_counter()
        running, seen = 0.0, 0
        for k in range(0, n, config.batch_size):
            idx = order[k:k + config.batch_size].tolist()
            hist, target, gt = dataset.batch(idx, dtype=dtype)
            opt.zero_grad()
            graph.reset()
            with graph:
                loss = policy.loss(hist, target, gt)
            value = float(loss.item())
            graph.backward(loss)
            bad = first_nonfinite_grad(policy.params)
            if not np.isfinite(value) or bad is not None:
                where = bad or "none (the loss itself is non-finite)"
                raise NonFiniteLoss(f"non-finite loss {value} at epoch {epoch}, step "
                                    f"{result.steps}; first non-finite gradient: {where}")
            opt.step()
            result.steps += 1
            result.step_losses.append(value)
            running += value * len(idx)
            seen += len(idx)
            if config.max_steps is not None and result.steps >= config.max_steps:
                break
        entry = {"epoch": epoch, "lr": opt.lr, "train_loss": running / max(seen, 1),
                 "val_loss": evaluate_loss(policy, validation), "steps": result.steps,
                 "seconds": round(time.perf_counter() - t0, 3)}
        result.history.append(entry)
        log.info("epoch %d lr %.2e train %.4f val %s", epoch, opt.lr, entry["train_loss"],
                 entry["val_loss"])
        if on_epoch is not None:
            on_epoch(entry)
        if config.max_steps is not None and result.steps >= config.max_steps:
            break
    return result


def write_loss_log(path, history) -> None:
    """One JSON object per epoch; wall-clock time is left out to keep logs reproducible."""
    with open(path, "w") as fh:
        for h in history:
            fh.write(json.dumps({k: v for k, v in h.items() if k != "seconds"}, sort_keys=True) + "\n")
