"""Target-point attention transformer for waypoint prediction.

The decoder turns a flattened perception feature map (``memory``, N tokens)
and one ego-frame target-point into Z ego-frame waypoints.  Each layer runs

    target-point self-attention -> patch cross-attention -> feed-forward

where the self-attention keys and values carry one extra token for the
target-point (the TAT arrangement) or, in the TET ablation, the target-point
is folded into the queries instead.  Waypoints are produced as per-step
offsets by a small MLP head and accumulated from the ego origin.

Two decoding modes exist: ``oneshot`` predicts all Z offsets in one pass and
``autoregressive`` runs Z passes, feeding back embedded predictions.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import numgrid as ng
from .numgrid import DimensionError, Tensor, UsageError

MODES = ("oneshot", "autoregressive")
QUERY_PE = ("sinusoidal", "none")
MEMORY_PE = ("learnable", "none", "sinusoidal_2d")
CONDITIONING = ("attention", "query_embed")


@dataclass
class DecoderConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    n_waypoints: int = 4
    ffn_depth: int = 3
    ffn_hidden: Optional[int] = None  # per-layer FFN width, default 2 * d_model
    activation: str = "leaky_relu"
    leaky_slope: float = 0.01
    mode: str = "oneshot"
    query_pe: str = "sinusoidal"
    memory_pe: str = "learnable"
    target_conditioning: str = "attention"
    use_layernorm_residual: bool = True
    scale_by_d_model: bool = False  # literal sqrt(d_model) instead of sqrt(d_head)
    values_with_pe: bool = False  # add positional codes to the value tokens too
    memory_shape: tuple[int, int] = (8, 8)
    target_scale: float = 32.0  # metres; target-points are divided by this
    dtype: str = "float64"

    def __post_init__(self):
        self.memory_shape = tuple(int(v) for v in self.memory_shape)
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_waypoints < 1 or self.ffn_depth < 1 or self.n_layers < 1:
            raise ValueError("n_waypoints, ffn_depth and n_layers must all be >= 1")
        if self.activation not in ng.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for name, allowed in (("mode", MODES), ("query_pe", QUERY_PE),
                              ("memory_pe", MEMORY_PE), ("target_conditioning", CONDITIONING)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_memory(self) -> int:
        return self.memory_shape[0] * self.memory_shape[1]

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or 2 * self.d_model

    def to_dict(self) -> dict:
        d = asdict(self)
        d["memory_shape"] = list(self.memory_shape)
        return d


# ------------------------------------------------------------ positional codes

def sinusoidal_pe(t: float, d_model: int) -> np.ndarray:
    """Component d is sin(t / 10000^(d/d_model)) for even d, cos(...) for odd d."""
    if t < 0:
        raise ValueError(f"time index must be non-negative, got {t}")
    # scalar libm calls so the values are bit-for-bit the closed form
    out = np.empty(d_model)
    for d in range(d_model):
        angle = t / 10000.0 ** (d / d_model)
        out[d] = math.sin(angle) if d % 2 == 0 else math.cos(angle)
    return out


def sinusoidal_table(steps, d_model: int) -> np.ndarray:
    return _cached_table(tuple(steps), d_model).copy()


@functools.lru_cache(maxsize=256)
def _cached_table(steps: tuple, d_model: int) -> np.ndarray:
    return np.stack([sinusoidal_pe(t, d_model) for t in steps]).reshape(len(steps), d_model)


def sinusoidal_2d_table(h0: int, w0: int, d_model: int) -> np.ndarray:
    """Row codes in the first half of the channels, column codes in the second."""
    half = d_model // 2
    rows = sinusoidal_table(range(h0), half)
    cols = sinusoidal_table(range(w0), d_model - half)
    out = np.zeros((h0, w0, d_model))
    out[:, :, :half] = rows[:, None, :]
    out[:, :, half:] = cols[None, :, :]
    return out.reshape(h0 * w0, d_model)


# ------------------------------------------------------------------- memory

def flatten_memory(feature_map: Tensor) -> Tensor:
    """(B, H0, W0, d) -> (B, H0*W0, d), row index varying slowest."""
    b, h0, w0, d = feature_map.shape
    return ng.reshape(feature_map, (b, h0 * w0, d))


def unflatten_memory(memory: Tensor, h0: int, w0: int) -> Tensor:
    b, n, d = memory.shape
    if n != h0 * w0:
        raise DimensionError(f"memory of {n} tokens cannot be viewed as {h0}x{w0}")
    return ng.reshape(memory, (b, h0, w0, d))


# ---------------------------------------------------------------- attention

def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = ng.reshape(x, (*lead, t, n_heads, d // n_heads))
    return ng.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = ng.swapaxes(x, -2, -3)
    *lead, t, h, dh = x.shape
    return ng.reshape(x, (*lead, t, h * dh))


def multi_head_attention(queries_in: Tensor, keys_in: Tensor, values_in: Tensor,
                         w: dict, n_heads: int, scale: float,
                         mask: Optional[np.ndarray] = None,
                         record: Optional[list] = None) -> Tensor:
    """Scaled dot-product attention with per-head projections.

    ``w`` holds ``wq, wk, wv, wo`` (all d x d).  ``mask`` is added to the
    scores before the softmax (``-inf`` hides a key).  When ``record`` is a
    list the softmax weights are appended to it.
    """
    if keys_in.shape[-2] != values_in.shape[-2]:
        raise DimensionError(
            f"keys have {keys_in.shape[-2]} tokens but values have {values_in.shape[-2]}"
        )
    q = _split_heads(ng.matmul(queries_in, w["wq"]), n_heads)
    k = _split_heads(ng.matmul(keys_in, w["wk"]), n_heads)
    v = _split_heads(ng.matmul(values_in, w["wv"]), n_heads)
    scores = ng.scale(ng.matmul(q, ng.swapaxes(k, -1, -2)), scale)
    if mask is not None:
        scores = ng.add(scores, Tensor(mask.astype(scores.dtype)))
    weights = ng.softmax_last_axis(scores)
    if record is not None:
        record.append(weights.data)
    return ng.matmul(_merge_heads(ng.matmul(weights, v)), w["wo"])


def target_self_attention(E: Tensor, U: Optional[Tensor], e_w: Tensor, u_embed: Optional[Tensor],
                          w: dict, n_heads: int, scale: float,
                          mask: Optional[np.ndarray] = None,
                          record: Optional[list] = None) -> Tensor:
    """Self-attention of Z query tokens over Z waypoint keys plus one target key.

    Queries come from ``E`` (waypoint embeddings with positional codes).
    Keys come from Concat(E, U); values from Concat(e_w, u_embed), the
    embeddings without positional codes.  Passing ``U=None`` and
    ``u_embed=None`` gives plain self-attention over Z tokens.
    """
    if (U is None) != (u_embed is None):
        raise DimensionError("target key and value tokens must be given together")
    if U is None:
        keys_in, values_in = E, e_w
    else:
        keys_in = ng.concat([E, U], axis=-2)
        values_in = ng.concat([e_w, u_embed], axis=-2)
    return multi_head_attention(E, keys_in, values_in, w, n_heads, scale, mask, record)


def patch_cross_attention(SA: Tensor, memory: Tensor, memory_pe: Optional[Tensor],
                          w: dict, n_heads: int, scale: float,
                          record: Optional[list] = None) -> Tensor:
    """Waypoint tokens attend over N memory patches; keys carry the memory codes."""
    if memory.shape[-2] < 1:
        raise UsageError("cross-attention over an empty memory")
    keys_in = memory if memory_pe is None else ng.add(memory, memory_pe)
    return multi_head_attention(SA, keys_in, memory, w, n_heads, scale, None, record)


def offsets_to_waypoints(offsets: Tensor) -> Tensor:
    """Accumulate per-step offsets (..., Z, 2) from the ego origin."""
    return ng.cumsum(offsets, axis=-2)


# -------------------------------------------------------------------- model

def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _normal(rng, shape, dtype, std=0.02):
    return Tensor((rng.standard_normal(size=shape) * std).astype(dtype), requires_grad=True)


def _const(value, shape, dtype):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


@dataclass
class DecodeTrace:
    """Softmax weights captured during a decode, one entry per layer.

    ``self_weights[l]`` is (B, heads, Z, Z+1) for TAT (last column is the
    target-point) or (B, heads, Z, Z) for TET; ``cross_weights[l]`` is
    (B, heads, Z, N).  ``self_keys[l]`` / ``self_values[l]`` hold the token
    rows fed to the self-attention key and value projections.
    """

    self_weights: list = field(default_factory=list)
    cross_weights: list = field(default_factory=list)
    self_keys: list = field(default_factory=list)
    self_values: list = field(default_factory=list)


class TATDecoder:
    """Parameters and forward passes of the waypoint decoder.

    ``params`` is an ordered name -> Tensor mapping; names are stable and
    used as checkpoint keys.
    """

    def __init__(self, config: DecoderConfig, seed: int = 0, prefix: str = "decoder"):
        config.validate()
        self.config = config
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------
    def _add(self, name: str, t: Tensor) -> Tensor:
        self.params[f"{self.prefix}.{name}"] = t
        return t

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def _build(self, rng) -> None:
        c = self.config
        d, dt, z = c.d_model, c.dtype, c.n_waypoints
        self._add("query_embed", _normal(rng, (z, d), dt))
        self._add("target_proj", _uniform(rng, 2, (2, d), dt))
        self._add("target_pe", _normal(rng, (d,), dt))
        if c.memory_pe == "learnable":
            self._add("memory_pe", _normal(rng, (c.n_memory, d), dt))
        if c.mode == "autoregressive":
            self._add("waypoint_embed.weight", _uniform(rng, 2, (2, d), dt))
            self._add("waypoint_embed.bias", _const(0.0, (d,), dt))
        if c.use_layernorm_residual:
            self._add("memory_norm.gain", _const(1.0, (d,), dt))
            self._add("memory_norm.bias", _const(0.0, (d,), dt))
        for l in range(c.n_layers):
            for block in ("self", "cross"):
                for m in ("wq", "wk", "wv", "wo"):
                    self._add(f"layers.{l}.{block}.{m}", _uniform(rng, d, (d, d), dt))
            self._add(f"layers.{l}.ffn.w1", _uniform(rng, d, (d, c.hidden), dt))
            self._add(f"layers.{l}.ffn.b1", _const(0.0, (c.hidden,), dt))
            self._add(f"layers.{l}.ffn.w2", _uniform(rng, c.hidden, (c.hidden, d), dt))
            self._add(f"layers.{l}.ffn.b2", _const(0.0, (d,), dt))
            if c.use_layernorm_residual:
                for n in ("norm1", "norm2", "norm3"):
                    self._add(f"layers.{l}.{n}.gain", _const(1.0, (d,), dt))
                    self._add(f"layers.{l}.{n}.bias", _const(0.0, (d,), dt))
        if c.use_layernorm_residual:
            self._add("final_norm.gain", _const(1.0, (d,), dt))
            self._add("final_norm.bias", _const(0.0, (d,), dt))
        dims = [d] * c.ffn_depth + [2]
        for i in range(c.ffn_depth):
            self._add(f"head.{i}.weight", _uniform(rng, dims[i], (dims[i], dims[i + 1]), dt))
            self._add(f"head.{i}.bias", _const(0.0, (dims[i + 1],), dt))

    # -- pieces -------------------------------------------------------------
    @property
    def attn_scale(self) -> float:
        c = self.config
        return 1.0 / math.sqrt(c.d_model if c.scale_by_d_model else c.d_head)

    def _act(self, x: Tensor) -> Tensor:
        c = self.config
        if c.activation == "leaky_relu":
            return ng.leaky_relu(x, c.leaky_slope)
        return ng.ACTIVATIONS[c.activation](x)

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return ng.layer_norm(x, self.p(f"{name}.gain"), self.p(f"{name}.bias"))

    def query_positions(self, count: int) -> Optional[Tensor]:
        if self.config.query_pe == "none":
            return None
        return Tensor(sinusoidal_table(range(1, count + 1), self.config.d_model)
                      .astype(self.config.dtype))

    def memory_positions(self) -> Optional[Tensor]:
        c = self.config
        if c.memory_pe == "learnable":
            return self.p("memory_pe")
        if c.memory_pe == "sinusoidal_2d":
            return Tensor(sinusoidal_2d_table(*c.memory_shape, c.d_model).astype(c.dtype))
        return None

    def target_embedding(self, target: Tensor) -> Tensor:
        """e_t = Linear(u / scale) without bias, shaped (B, 1, d)."""
        u = ng.scale(target, 1.0 / self.config.target_scale)
        e_t = ng.matmul(u, self.p("target_proj"))
        return ng.reshape(e_t, (e_t.shape[0], 1, e_t.shape[1]))

    def prepare_memory(self, memory: Tensor) -> Tensor:
        c = self.config
        if memory.ndim != 3 or memory.shape[-1] != c.d_model:
            raise DimensionError(f"memory must be (B, N, {c.d_model}), got {memory.shape}")
        if c.memory_pe == "learnable" and memory.shape[1] != c.n_memory:
            raise DimensionError(f"memory has {memory.shape[1]} tokens, config expects {c.n_memory}")
        if c.use_layernorm_residual:
            memory = self._norm("memory_norm", memory)
        return memory

    def ffn_head(self, tokens: Tensor) -> Tensor:
        c = self.config
        x = tokens
        for i in range(c.ffn_depth):
            x = ng.linear(x, self.p(f"head.{i}.weight"), self.p(f"head.{i}.bias"))
            if i < c.ffn_depth - 1:
                x = self._act(x)
        return x

    def _layer(self, l: int, x: Tensor, qpe: Optional[Tensor], target_tok: Optional[Tensor],
               memory: Tensor, mpe: Optional[Tensor], mask, trace: Optional[DecodeTrace]) -> Tensor:
        c = self.config
        lp = f"layers.{l}"
        attn_w = {m: self.p(f"{lp}.self.{m}") for m in ("wq", "wk", "wv", "wo")}
        cross_w = {m: self.p(f"{lp}.cross.{m}") for m in ("wq", "wk", "wv", "wo")}
        res = c.use_layernorm_residual

        h = self._norm(f"{lp}.norm1", x) if res else x
        E = h if qpe is None else ng.add(h, qpe)
        if target_tok is not None:
            tshape = h.shape[:-2] + (1, c.d_model)
            u_embed = target_tok if target_tok.shape == tshape else ng.broadcast_to(target_tok, tshape)
            U = ng.add(u_embed, self.p("target_pe"))
        else:
            U = u_embed = None
        values_src = E if c.values_with_pe else h
        value_tok = (U if c.values_with_pe else u_embed) if U is not None else None
        record = trace.self_weights if trace is not None else None
        if trace is not None:
            trace.self_keys.append(np.concatenate([E.data, U.data], axis=-2) if U is not None else E.data)
            trace.self_values.append(np.concatenate([values_src.data, value_tok.data], axis=-2)
                                     if U is not None else values_src.data)
        sa = target_self_attention(E, U, values_src, value_tok, attn_w, c.n_heads,
                                   self.attn_scale, mask, record)
        x = ng.add(x, sa) if res else sa

        h = self._norm(f"{lp}.norm2", x) if res else x
        ca = patch_cross_attention(h, memory, mpe, cross_w, c.n_heads, self.attn_scale,
                                   trace.cross_weights if trace is not None else None)
        x = ng.add(x, ca) if res else ca

        h = self._norm(f"{lp}.norm3", x) if res else x
        f = self._act(ng.linear(h, self.p(f"{lp}.ffn.w1"), self.p(f"{lp}.ffn.b1")))
        f = ng.linear(f, self.p(f"{lp}.ffn.w2"), self.p(f"{lp}.ffn.b2"))
        return ng.add(x, f) if res else f

    def _stack(self, tokens: Tensor, memory: Tensor, target: Tensor, n_pos: int,
               mask=None, trace: Optional[DecodeTrace] = None) -> Tensor:
        """Run all layers over query tokens (..., T, d); returns (..., T, d)."""
        c = self.config
        e_t = self.target_embedding(target)  # (B, 1, d)
        if tokens.ndim == 4:  # (B, S, T, d) sequence batch, memory broadcasts over S
            e_t = ng.reshape(e_t, (e_t.shape[0], 1, 1, c.d_model))
        if c.target_conditioning == "query_embed":
            tokens = ng.add(tokens, ng.add(e_t, self.p("target_pe")))
            target_tok = None
        else:
            target_tok = e_t
        qpe = self.query_positions(n_pos)
        mem = self.prepare_memory(memory)
        mpe = self.memory_positions()
        if tokens.ndim == 4:
            mem = ng.reshape(mem, (mem.shape[0], 1) + mem.shape[1:])
        x = tokens
        for l in range(c.n_layers):
            x = self._layer(l, x, qpe, target_tok, mem, mpe, mask, trace)
        if c.use_layernorm_residual:
            x = self._norm("final_norm", x)
        return x

    # -- decoding -----------------------------------------------------------
    def _check_inputs(self, memory: Tensor, target: Tensor) -> None:
        if target.ndim != 2 or target.shape[-1] != 2:
            raise DimensionError(f"target must be (B, 2), got {target.shape}")
        if memory.ndim != 3 or memory.shape[0] != target.shape[0]:
            raise DimensionError(f"memory {memory.shape} and target {target.shape} batch mismatch")

    def decode_oneshot(self, memory: Tensor, target: Tensor,
                       trace: Optional[DecodeTrace] = None) -> Tensor:
        """All Z queries in one pass; returns waypoints (B, Z, 2)."""
        self._check_inputs(memory, target)
        b = target.shape[0]
        c = self.config
        queries = ng.broadcast_to(self.p("query_embed"), (b, c.n_waypoints, c.d_model))
        out = self._stack(queries, memory, target, c.n_waypoints, trace=trace)
        return offsets_to_waypoints(self.ffn_head(out))

    def _ar_tokens(self, previous: Optional[Tensor], step: int, b: int) -> Tensor:
        c = self.config
        seed = ng.reshape(self.p("query_embed")[step:step + 1], (1, 1, c.d_model))
        seed = ng.broadcast_to(seed, (b, 1, c.d_model))
        if previous is None or step == 0:
            return seed
        emb = ng.linear(previous, self.p("waypoint_embed.weight"), self.p("waypoint_embed.bias"))
        return ng.concat([emb, seed], axis=1)

    def decode_autoregressive(self, memory: Tensor, target: Tensor,
                              teacher: Optional[Tensor] = None,
                              trace: Optional[DecodeTrace] = None) -> Tensor:
        """Z sequential passes; step i sees embedded w_1..w_{i-1} then seed_i.

        With ``teacher`` (B, Z, 2) the fed-back waypoints are ground truth and
        the result is the one-step prediction ``teacher_{i-1} + offset_i``.
        """
        self._check_inputs(memory, target)
        c = self.config
        b = target.shape[0]
        waypoints: list[Tensor] = []
        prev = Tensor(np.zeros((b, 1, 2), dtype=c.dtype))
        for i in range(c.n_waypoints):
            if teacher is not None:
                history = teacher[:, :i] if i else None
            else:
                history = ng.concat(waypoints, axis=1) if i else None
            tokens = self._ar_tokens(history, i, b)
            last = i == c.n_waypoints - 1
            out = self._stack(tokens, memory, target, i + 1,
                              trace=trace if (last and trace is not None) else None)
            offset = self.ffn_head(out[:, i:i + 1])
            base = prev if teacher is None or i == 0 else teacher[:, i - 1:i]
            w = ng.add(base, offset)
            waypoints.append(w)
            prev = w
        return ng.concat(waypoints, axis=1)

    def teacher_forced_parallel(self, memory: Tensor, target: Tensor, teacher: Tensor) -> Tensor:
        """All Z auto-regressive steps as one padded, key-masked batch.

        Sequence s holds embed(w_1..w_s), seed_{s+1} and padding; padded
        keys are masked so the result equals the step-by-step pass.
        """
        self._check_inputs(memory, target)
        c = self.config
        z, d = c.n_waypoints, c.d_model
        b = target.shape[0]
        if teacher.shape != (b, z, 2):
            raise DimensionError(f"teacher waypoints must be {(b, z, 2)}, got {teacher.shape}")
        seq = np.arange(z)[:, None]
        slot = np.arange(z)[None, :]
        prev_mask = (slot < seq).astype(c.dtype)[..., None]   # (S, T, 1)
        diag_mask = (slot == seq).astype(c.dtype)[..., None]
        emb = ng.linear(teacher, self.p("waypoint_embed.weight"), self.p("waypoint_embed.bias"))
        emb = ng.reshape(emb, (b, 1, z, d))
        tokens = ng.add(ng.mul(emb, Tensor(prev_mask)),
                        ng.mul(ng.reshape(self.p("query_embed"), (1, 1, z, d)), Tensor(diag_mask)))
        n_keys = z + (1 if c.target_conditioning == "attention" else 0)
        mask = np.zeros((z, 1, 1, n_keys))
        mask[:, 0, 0, :z] = np.where(slot <= seq, 0.0, -np.inf)
        out = self._stack(tokens, memory, target, z, mask=mask)
        ar = np.arange(z)
        diag = out[:, ar, ar]  # (B, Z, d)
        offsets = self.ffn_head(diag)
        shifted = ng.concat([Tensor(np.zeros((b, 1, 2), dtype=c.dtype)), teacher[:, :z - 1]], axis=1)
        return ng.add(shifted, offsets)

    def decode(self, memory: Tensor, target: Tensor, trace: Optional[DecodeTrace] = None) -> Tensor:
        if self.config.mode == "oneshot":
            return self.decode_oneshot(memory, target, trace)
        return self.decode_autoregressive(memory, target, trace=trace)

    def training_prediction(self, memory: Tensor, target: Tensor, gt: Tensor) -> Tensor:
        """Prediction used for the training loss (teacher-forced when auto-regressive)."""
        if self.config.mode == "oneshot":
            return self.decode_oneshot(memory, target)
        return self.teacher_forced_parallel(memory, target, gt)

    def attention_trace(self, memory: Tensor, target: Tensor) -> tuple[Tensor, DecodeTrace]:
        """Decode once and return the waypoints with every softmax weight used.

        For the auto-regressive mode the weights of the final step (the one
        that sees all Z tokens) are returned.
        """
        trace = DecodeTrace()
        out = self.decode(memory, target, trace)
        return out, trace
