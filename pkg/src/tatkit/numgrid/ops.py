"""Differentiable operations.

Every op takes :class:`Tensor` (or array-like constants) and returns a new
Tensor.  Backward closures return one gradient per input, or ``None`` where
an input needs none.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import DimensionError, Tensor, UsageError, as_tensor, make


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(g, sb) if b.requires_grad else None,
        )

    return make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(-g, sb) if b.requires_grad else None,
        )

    return make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make(ad * bd, (a, b), bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return make(x.data * c, (x,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(f"matmul: batch extents differ for {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # shared weight: fold the batch axes into one GEMM
        k, n = bd.shape
        flat = ad.reshape(-1, k)

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = flat.T @ g2 if b.requires_grad else None
            return ga, gb

        return make((flat @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), bw)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make(ad @ bd, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` shaped (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ------------------------------------------------------------------ reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# -------------------------------------------------------------------- shaping

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    old = x.shape
    return make(out, (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty sequence")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in ts]} disagree off-axis"
            )
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return make(np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def index(x, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return make(x.data[idx], (x,), bw)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def cumsum(x, axis: int = 0) -> Tensor:
    """Cumulative sum; backward is the reversed cumulative sum."""
    x = as_tensor(x)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return make(np.cumsum(x.data, axis=axis), (x,), bw)


def space_to_depth(x, block: int) -> Tensor:
    """(B, H, W, C) -> (B, H/k, W/k, k*k*C) non-overlapping patch gather."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"space_to_depth needs (B,H,W,C), got {x.shape}")
    b, h, w, c = x.shape
    k = int(block)
    if h % k or w % k:
        raise DimensionError(f"space_to_depth: {h}x{w} not divisible by block {k}")
    out = (
        x.data.reshape(b, h // k, k, w // k, k, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, h // k, w // k, k * k * c)
    )

    def bw(g):
        return (
            g.reshape(b, h // k, w // k, k, k, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c),
        )

    return make(out, (x,), bw)


# ----------------------------------------------------------------- nonlinear

def softmax_last_axis(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[-1] == 0:
        raise DimensionError(f"softmax over an empty last axis, shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make(y, (x,), bw)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    pos = x.data >= 0
    d = np.where(pos, 1.0, slope).astype(x.dtype)
    return make(x.data * d, (x,), lambda g: (g * d,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make(y, (x,), lambda g: (g * y * (1.0 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make(y, (x,), bw)


ACTIVATIONS = {"leaky_relu": leaky_relu, "tanh": tanh, "gelu": gelu}


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1] if x.ndim else 0
    if n < 1:
        raise DimensionError(f"layer_norm over an empty last axis, shape {x.shape}")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({n},) for input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return make(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------- losses

def l2_waypoint_loss(pred, gt, squared: bool = False) -> Tensor:
    """Sum over waypoints of the Euclidean error, averaged over leading axes.

    ``pred`` and ``gt`` are (..., Z, 2).  With ``squared=True`` the squared
    norm is summed instead.
    """
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"l2_waypoint_loss: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim < 2 or pred.shape[-2] < 1:
        raise DimensionError(f"l2_waypoint_loss needs (..., Z>=1, D), got {pred.shape}")
    diff = pred.data - gt.data
    sq = (diff * diff).sum(axis=-1)
    batch = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    if squared:
        value = sq.sum() / batch

        def bw(g):
            return (g * 2.0 * diff / batch, None)
    else:
        norms = np.sqrt(sq)
        value = norms.sum() / batch

        def bw(g):
            safe = np.where(norms > 0, norms, 1.0)
            unit = np.where((norms > 0)[..., None], diff / safe[..., None], 0.0)
            return (g * unit / batch, None)

    return make(np.asarray(value, dtype=pred.dtype), (pred, gt), bw)


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


def check_scalar(t: Tensor) -> None:
    if t.data.size != 1:
        raise UsageError(f"expected a scalar tensor, got {t.shape}")
