"""Encoder + waypoint head policies: the two TAT decoders, TET and the GRU baseline."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .. import numgrid as ng
from ..decoder import DecoderConfig, TATDecoder, flatten_memory
from ..numgrid import DimensionError, Tensor
from ..perception import BevEncoder, EncoderConfig

VARIANTS = ("tat_ct", "tat_rt", "tet", "gru")


def decoder_config_for(variant: str, base: DecoderConfig) -> DecoderConfig:
    d = base.to_dict()
    if variant == "tat_ct":
        d.update(mode="oneshot", target_conditioning="attention")
    elif variant == "tat_rt":
        d.update(mode="autoregressive", target_conditioning="attention")
    elif variant == "tet":
        d.update(mode="oneshot", target_conditioning="query_embed")
    else:
        raise ValueError(f"no decoder for variant {variant!r}")
    return DecoderConfig(**d)


@dataclass
class GruBaselineConfig:
    hidden: int = 64
    n_waypoints: int = 4
    target_scale: float = 32.0
    dtype: str = "float64"

    def to_dict(self) -> dict:
        return asdict(self)


class GruHead:
    """Pooled feature vector -> h0, then one GRU cell unrolled Z times.

    Each step reads the previous waypoint and the scaled target-point and
    emits an offset; the head always feeds back its own predictions.
    """

    def __init__(self, config: GruBaselineConfig, feature_width: int, seed: int = 0,
                 prefix: str = "gru"):
        self.config = config
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        h, dt = config.hidden, config.dtype

        def uni(fan_in, shape):
            b = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-b, b, shape).astype(dt), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

        self.params[f"{prefix}.init.weight"] = uni(feature_width, (feature_width, h))
        self.params[f"{prefix}.init.bias"] = zeros((h,))
        for gate in ("z", "r", "n"):
            self.params[f"{prefix}.{gate}.wx"] = uni(4, (4, h))
            self.params[f"{prefix}.{gate}.wh"] = uni(h, (h, h))
            self.params[f"{prefix}.{gate}.b"] = zeros((h,))
        self.params[f"{prefix}.out.weight"] = uni(h, (h, 2))
        self.params[f"{prefix}.out.bias"] = zeros((2,))

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def cell(self, x: Tensor, h: Tensor) -> Tensor:
        z = ng.sigmoid(ng.add(ng.matmul(x, self.p("z.wx")), ng.linear(h, self.p("z.wh"), self.p("z.b"))))
        r = ng.sigmoid(ng.add(ng.matmul(x, self.p("r.wx")), ng.linear(h, self.p("r.wh"), self.p("r.b"))))
        n = ng.tanh(ng.add(ng.linear(x, self.p("n.wx"), self.p("n.b")),
                           ng.mul(r, ng.matmul(h, self.p("n.wh")))))
        return ng.add(n, ng.mul(z, ng.sub(h, n)))

    def decode(self, feature_map: Tensor, target: Tensor) -> Tensor:
        c = self.config
        b = feature_map.shape[0]
        pooled = ng.mean(feature_map, axis=(1, 2))  # (B, C): the 1-D bottleneck
        h = ng.tanh(ng.linear(pooled, self.p("init.weight"), self.p("init.bias")))
        u = ng.scale(target, 1.0 / c.target_scale)
        w = Tensor(np.zeros((b, 2), dtype=c.dtype))
        out = []
        for _ in range(c.n_waypoints):
            h = self.cell(ng.concat([w, u], axis=1), h)
            w = ng.add(w, ng.linear(h, self.p("out.weight"), self.p("out.bias")))
            out.append(ng.reshape(w, (b, 1, 2)))
        return ng.concat(out, axis=1)


@dataclass
class PolicyConfig:
    variant: str = "tat_ct"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    gru: GruBaselineConfig = field(default_factory=GruBaselineConfig)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        if isinstance(self.gru, dict):
            self.gru = GruBaselineConfig(**self.gru)
        # one precision for the whole model, taken from the encoder
        self.decoder.dtype = self.gru.dtype = self.encoder.dtype

    def to_dict(self) -> dict:
        return {"variant": self.variant, "encoder": self.encoder.to_dict(),
                "decoder": self.decoder.to_dict(), "gru": self.gru.to_dict(), "seed": self.seed}


class Policy:
    """pi(X, u): histogram and target-point in, Z ego-frame waypoints out."""

    def __init__(self, config: PolicyConfig):
        self.config = config
        c = config
        self.encoder = BevEncoder(c.encoder, seed=c.seed)
        if c.variant == "gru":
            self.head = GruHead(c.gru, c.encoder.width, seed=c.seed + 1)
            self.decoder = None
        else:
            dcfg = decoder_config_for(c.variant, c.decoder)
            if dcfg.d_model != c.encoder.width:
                raise DimensionError(f"encoder width {c.encoder.width} != d_model {dcfg.d_model}")
            side = c.encoder.output_size
            if tuple(dcfg.memory_shape) != (side, side):
                raise DimensionError(f"decoder memory_shape {dcfg.memory_shape} != encoder output "
                                     f"{(side, side)}")
            self.decoder = TATDecoder(dcfg, seed=c.seed + 1)
            self.head = self.decoder
        self.params: dict[str, Tensor] = {**self.encoder.params, **self.head.params}

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def n_waypoints(self) -> int:
        return self.config.gru.n_waypoints if self.decoder is None else self.decoder.config.n_waypoints

    def _inputs(self, hist, target):
        dtype = self.config.encoder.dtype
        x = hist if isinstance(hist, Tensor) else Tensor(np.asarray(hist, dtype=dtype))
        u = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=dtype))
        return x, u

    def forward(self, hist, target, gt=None) -> Tensor:
        """Waypoints (B, Z, 2).  ``hist`` is already normalised.

        Given ``gt`` the auto-regressive decoder is teacher-forced.
        """
        x, u = self._inputs(hist, target)
        fmap = self.encoder.encode(x)
        if self.decoder is None:
            return self.head.decode(fmap, u)
        memory = flatten_memory(fmap)
        if gt is not None:
            gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=x.dtype))
            return self.decoder.training_prediction(memory, u, gt)
        return self.decoder.decode(memory, u)

    def loss(self, hist, target, gt) -> Tensor:
        gt_t = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=self.config.encoder.dtype))
        pred = self.forward(hist, target, gt_t)
        return ng.l2_waypoint_loss(pred, gt_t)

    def predict(self, hist, target) -> np.ndarray:
        """Inference without recording; returns float64 waypoints."""
        return np.asarray(self.forward(hist, target).data, dtype=np.float64)

    def attention_trace(self, hist, target):
        if self.decoder is None:
            raise ValueError("the GRU baseline has no attention to trace")
        x, u = self._inputs(hist, target)
        memory = flatten_memory(self.encoder.encode(x))
        return self.decoder.attention_trace(memory, u)
