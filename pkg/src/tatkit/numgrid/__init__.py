"""Minimal dense-tensor core with reverse-mode differentiation."""

from . import ops
from .ops import (
    ACTIVATIONS,
    add,
    broadcast_to,
    concat,
    cumsum,
    gelu,
    index,
    l2_waypoint_loss,
    layer_norm,
    leaky_relu,
    linear,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    sigmoid,
    softmax_last_axis,
    space_to_depth,
    sub,
    swapaxes,
    tanh,
)
from .optim import AdamW, AdamWState, adamw_step, step_lr
from .tensor import (
    DimensionError,
    Graph,
    Tensor,
    UsageError,
    active_graph,
    as_tensor,
    backward,
)

__all__ = [
    "ACTIVATIONS",
    "AdamW",
    "AdamWState",
    "DimensionError",
    "Graph",
    "Tensor",
    "UsageError",
    "active_graph",
    "adamw_step",
    "add",
    "as_tensor",
    "backward",
    "broadcast_to",
    "concat",
    "cumsum",
    "gelu",
    "index",
    "l2_waypoint_loss",
    "layer_norm",
    "leaky_relu",
    "linear",
    "matmul",
    "mean",
    "mul",
    "ops",
    "reshape",
    "scale",
    "sigmoid",
    "softmax_last_axis",
    "space_to_depth",
    "step_lr",
    "sub",
    "swapaxes",
    "tanh",
]
