"""AdamW with decoupled weight decay, plus the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .tensor import DimensionError, Tensor, UsageError


@dataclass
class AdamWState:
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Optional[Mapping[str, np.ndarray]],
    state: AdamWState,
) -> None:
    """Apply one AdamW update in place.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a
    gradient are still decayed and their moments advance with a zero gradient.
    Decay is applied to the parameter directly, never through the moments.
    """
    b1, b2 = state.betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    lr = state.learning_rate
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise DimensionError(f"moment buffer for {name!r} has shape {m.shape}, parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        data = p.data
        if state.weight_decay:
            data = data * (1.0 - lr * state.weight_decay)
        p.data = (data - lr * update).astype(p.dtype, copy=False)
    state.step = t


class AdamW:
    """Thin stateful wrapper used by the training loop."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = dict(params)
        self.state = AdamWState(lr, tuple(betas), eps, weight_decay)

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.learning_rate = float(value)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, None, self.state)


def step_lr(epoch: int, base_lr: float = 1e-4, milestones: Sequence[int] = (40, 70),
            gamma: float = 0.1) -> float:
    """Learning rate for ``epoch`` (0-based) under a multi-step decay."""
    if epoch < 0:
        raise UsageError(f"epoch must be non-negative, got {epoch}")
    drops = sum(1 for m in milestones if epoch >= m)
    return base_lr * gamma**drops
