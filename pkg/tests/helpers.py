"""Finite-difference oracles shared by the test modules."""

import numpy as np

from tatkit import numgrid as ng


def numeric_grad(f, arrays, i, eps=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[i]``, entry by entry."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        k = it.multi_index
        old = x[k]
        x[k] = old + eps
        fp = f(*arrays)
        x[k] = old - eps
        fm = f(*arrays)
        x[k] = old
        g[k] = (fp - fm) / (2 * eps)
    return g


def relative_error(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def analytic_grads(build, arrays, probe):
    """Gradients of sum(build(*tensors) * probe) w.r.t. every input array."""
    tensors = [ng.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ng.Graph() as g:
        out = build(*tensors)
        loss = ng.ops.sum(ng.mul(out, ng.Tensor(probe)))
    g.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def op_gradcheck(build, arrays, seed=0, eps=1e-6):
    """Largest relative error between tape and central-difference gradients.

    The op output is contracted with a fixed random probe so every output
    entry contributes to the scalar being differentiated.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = build(*[ng.Tensor(a) for a in arrays]).data
    probe = np.random.default_rng(seed).normal(size=out.shape)

    def scalar(*xs):
        return float(np.sum(build(*[ng.Tensor(x) for x in xs]).data * probe))

    tape = analytic_grads(build, arrays, probe)
    worst = 0.0
    for i in range(len(arrays)):
        fd = numeric_grad(scalar, arrays, i, eps)
        worst = max(worst, relative_error(tape[i], fd))
    return worst


def param_gradcheck(loss_fn, params, rng, eps=1e-6):
    """Directional central differences for every parameter tensor.

    For each tensor a random unit direction ``v`` is drawn; the tape value
    ``<grad, v>`` is compared with ``(L(p + eps v) - L(p - eps v)) / 2 eps``.
    The error is scaled by ``|grad|``, the largest value ``<grad, v>`` can
    take, so it is the norm-wise relative error seen along ``v``; a direction
    that happens to be near-orthogonal to the gradient does not blow it up.
    Returns the worst relative error and the parameter name it came from.
    """
    for p in params.values():
        p.grad = None
    with ng.Graph() as g:
        loss = loss_fn()
    g.backward(loss)
    tape = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for k, p in params.items()}
    worst, where = 0.0, None
    for name, p in params.items():
        v = rng.normal(size=p.shape)
        v /= np.linalg.norm(v)
        base = p.data.copy()
        p.data = base + eps * v
        fp = loss_fn().item()
        p.data = base - eps * v
        fm = loss_fn().item()
        p.data = base
        fd = (fp - fm) / (2 * eps)
        an = float(np.sum(tape[name] * v))
        err = abs(an - fd) / max(float(np.linalg.norm(tape[name])), abs(fd), 1e-10)
        if err > worst:
            worst, where = err, name
    return worst, where
