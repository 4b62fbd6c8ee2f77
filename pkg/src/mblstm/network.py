"""The M-BLSTM segmentation network.

Layout for ``depth = d`` and base width ``C0`` (level ``l`` has ``C_l = C0 * 2**l``
channels, the bottleneck sits at level ``d``)::

    enc0    = dconv(x)                                          3 -> C0 -> C0
    enc_l   = dconv(cat(maxpool(enc_{l-1}), inj_l(avgpool(x, 2**l))))    l = 1 .. d
              (inj_l: 3x3 conv 3 -> C_{l-1}; dconv: 2C_{l-1} -> C_l -> C_l)
    dec_d   = enc_d                                             (bottleneck)
    up_l    = relu(conv3x3(upsample(dec_{l+1})))                C_{l+1} -> C_l
    dec_l   = dconv(skip_fuse_l(enc_l, up_l))                   C_l -> C_l -> C_l
    side_l  = sigmoid(upsample^l(conv1x1(dec_l)))               C_l -> 2
    average = mean(side_0 .. side_{d-1})

Every 3x3 conv is followed by ReLU. With BLSTM switched off at a level the
fusion is ``relu(conv3x3(cat(enc_l, up_l)))`` (2C_l -> C_l), i.e. a plain
U-Net skip.

Parameter count, with ``conv(k, a, b) = k*k*a*b + b``::

    sum_{l=0}^{d-1} [ up_l + fuse_l + 2*conv(3, C_l, C_l) + conv(1, C_l, 2) ]
      + sum_{l=1}^{d} [ conv(3, 3, C_{l-1}) + conv(3, 2C_{l-1}, C_l) + conv(3, C_l, C_l) ]
      + conv(3, 3, C0) + conv(3, C0, C0)

    up_l   = conv(3, C_{l+1}, C_l)
    fuse_l = 2 * (72 * C_l**2 + 4 * C_l) + conv(3, 2C_l, C_l)   (BLSTM on)
           = conv(3, 2C_l, C_l)                                   (BLSTM off)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .layers import GATES, ConvLstmParams, SkipFusionParams, conv_params, skip_fuse
from .metrics import BACKGROUND, CUP_LABEL, DISC_LABEL, SegMask
from .tensor import Tensor

DISC, CUP = 0, 1


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 4
    base_channels: int = 8
    in_channels: int = 3
    out_channels: int = 2
    input_size: int = 64
    blstm_levels: tuple[bool, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.blstm_levels is None:
            object.__setattr__(self, "blstm_levels", (True,) * self.depth)
        else:
            object.__setattr__(self, "blstm_levels", tuple(bool(v) for v in self.blstm_levels))
        self.validate()

    def validate(self) -> None:
        if self.depth < 2:
            raise ContractError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ContractError("channel counts must be positive")
        if self.input_size < 1 or self.input_size % (2 ** self.depth):
            raise ContractError(f"input_size {self.input_size} not divisible by 2**depth = {2 ** self.depth}")
        if len(self.blstm_levels) != self.depth:
            raise ContractError(f"blstm_levels needs {self.depth} entries, got {len(self.blstm_levels)}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


@dataclass
class ModelParams:
    """Named weight tensors plus the configuration that shaped them."""

    config: NetworkConfig
    tensors: dict[str, Tensor]
    skips: dict[int, SkipFusionParams] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        T.zero_grad(self.tensors.values())


def build(config: NetworkConfig) -> ModelParams:
    """He-initialised parameters, deterministic per config (including its seed)."""
    config.validate()
    gen = T.rng(config.seed)
    p: dict[str, Tensor] = {}
    skips: dict[int, SkipFusionParams] = {}

    def conv(name: str, cin: int, cout: int, k: int = 3) -> None:
        p[f"{name}.w"], p[f"{name}.b"] = conv_params(gen, cin, cout, k)

    c = config.channels
    conv("enc0.conv1", config.in_channels, c(0))
    conv("enc0.conv2", c(0), c(0))
    for lvl in range(1, config.depth + 1):
        conv(f"inj{lvl}", config.in_channels, c(lvl - 1))
        conv(f"enc{lvl}.conv1", 2 * c(lvl - 1), c(lvl))
        conv(f"enc{lvl}.conv2", c(lvl), c(lvl))
    for lvl in reversed(range(config.depth)):
        conv(f"dec{lvl}.up", c(lvl + 1), c(lvl))
        if config.blstm_levels[lvl]:
            sf = SkipFusionParams.init(gen, c(lvl), c(lvl), c(lvl))
            skips[lvl] = sf
            for k, v in sf.tensors().items():
                p[f"skip{lvl}.{k}"] = v
        else:
            conv(f"skip{lvl}.plain", 2 * c(lvl), c(lvl))
        conv(f"dec{lvl}.conv1", c(lvl), c(lvl))
        conv(f"dec{lvl}.conv2", c(lvl), c(lvl))
        conv(f"side{lvl}", c(lvl), config.out_channels, k=1)
    for name, t in p.items():
        t.name = name
    return ModelParams(config, p, skips)


def rebind_skips(params: ModelParams) -> None:
    """Recreate the SkipFusionParams views after ``params.tensors`` was replaced."""
    cfg = params.config
    params.skips = {}
    for lvl in range(cfg.depth):
        if not cfg.blstm_levels[lvl]:
            continue
        pre = f"skip{lvl}"
        hid = cfg.channels(lvl)

        def cell(direction: str) -> ConvLstmParams:
            kw = {}
            for g in GATES:
                for part in (f"w_x{g}", f"w_h{g}", f"b_{g}"):
                    kw[part] = params.tensors[f"{pre}.{direction}.{part}"]
            return ConvLstmParams(hidden_channels=hid, **kw)

        params.skips[lvl] = SkipFusionParams(
            cell("fwd"), cell("bwd"), params.tensors[f"{pre}.fuse.w"], params.tensors[f"{pre}.fuse.b"]
        )


def _conv_relu(p: ModelParams, name: str, x: Tensor) -> Tensor:
    w = p[f"{name}.w"]
    return T.relu(T.conv2d(x, w, p[f"{name}.b"], stride=1, pad=w.shape[2] // 2))


def forward(params: ModelParams, x: Tensor) -> tuple[list[Tensor], Tensor]:
    """Side outputs (one per decoder level, finest first) and their mean, all (N, 2, S, S)."""
    cfg = params.config
    n, cin, h, w = x.shape
    if cin != cfg.in_channels or h != cfg.input_size or w != cfg.input_size:
        raise DimensionError(
            f"network expects (N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {x.shape}"
        )

    enc = [_conv_relu(params, "enc0.conv2", _conv_relu(params, "enc0.conv1", x))]
    for lvl in range(1, cfg.depth + 1):
        pooled = T.maxpool2(enc[-1])
        injected = _conv_relu(params, f"inj{lvl}", T.avgpool_down(x, 2 ** lvl))
        z = T.concat_channels([pooled, injected])
        enc.append(_conv_relu(params, f"enc{lvl}.conv2", _conv_relu(params, f"enc{lvl}.conv1", z)))

    dec = enc[cfg.depth]
    sides: dict[int, Tensor] = {}
    for lvl in reversed(range(cfg.depth)):
        up = _conv_relu(params, f"dec{lvl}.up", T.upsample2_nearest(dec))
        if cfg.blstm_levels[lvl]:
            fused = skip_fuse(params.skips[lvl], enc[lvl], up)
        else:
            fused = _conv_relu(params, f"skip{lvl}.plain", T.concat_channels([enc[lvl], up]))
        dec = _conv_relu(params, f"dec{lvl}.conv2", _conv_relu(params, f"dec{lvl}.conv1", fused))
        logits = T.conv2d(dec, params[f"side{lvl}.w"], params[f"side{lvl}.b"])
        for _ in range(lvl):
            logits = T.upsample2_nearest(logits)
        sides[lvl] = T.sigmoid(logits)

    side_outputs = [sides[lvl] for lvl in range(cfg.depth)]
    total = side_outputs[0]
    for s in side_outputs[1:]:
        total = T.add(total, s)
    average = T.scale(total, 1.0 / len(side_outputs))
    stacked_mean = np.mean(np.stack([s.data for s in side_outputs]), axis=0)
    if not np.allclose(average.data, stacked_mean, rtol=8 * np.finfo(average.data.dtype).eps, atol=0):
        raise AssertionError("averaged output drifted from the mean of side outputs")
    return side_outputs, average


def predict_mask(probs, threshold: float = 0.5) -> SegMask:
    """Threshold a (2, H, W) or (1, 2, H, W) probability map into a 3-class mask.

    Channel 0 is disc (including cup), channel 1 is cup. Cup is kept only
    where disc is on, so the result always satisfies cup inside disc.
    """
    a = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise DimensionError("predict_mask takes a single image; use predict_masks for batches")
        a = a[0]
    if a.ndim != 3 or a.shape[0] != 2:
        raise DimensionError(f"predict_mask expects (2, H, W) probabilities, got {a.shape}")
    disc = a[DISC] >= threshold
    cup = (a[CUP] >= threshold) & disc
    labels = np.full(disc.shape, BACKGROUND, dtype=np.uint8)
    labels[disc] = DISC_LABEL
    labels[cup] = CUP_LABEL
    return SegMask(labels)


def predict_masks(probs, threshold: float = 0.5) -> list[SegMask]:
    a = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return [predict_mask(a[i], threshold) for i in range(a.shape[0])]
