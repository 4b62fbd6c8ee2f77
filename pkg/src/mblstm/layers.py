"""ConvLSTM cell, bidirectional runner and the skip-connection fusion block."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

GATES = ("i", "f", "o", "g")


def he_normal(gen: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    values = gen.standard_normal(shape, dtype=np.float64) * np.sqrt(2.0 / fan_in)
    return Tensor(values, requires_grad=True)


def conv_params(gen: np.random.Generator, cin: int, cout: int, k: int = 3) -> tuple[Tensor, Tensor]:
    """He-initialised kernel and zero bias for a ``k x k`` convolution."""
    w = he_normal(gen, (cout, cin, k, k), cin * k * k)
    b = T.zeros((1, cout, 1, 1), requires_grad=True)
    return w, b


@dataclass
class ConvLstmParams:
    """Per-gate input-to-hidden (``w_x*``) and hidden-to-hidden (``w_h*``) kernels."""

    w_xi: Tensor
    w_hi: Tensor
    w_xf: Tensor
    w_hf: Tensor
    w_xo: Tensor
    w_ho: Tensor
    w_xg: Tensor
    w_hg: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor
    hidden_channels: int

    @classmethod
    def init(cls, gen: np.random.Generator, in_channels: int, hidden: int, k: int = 3) -> ConvLstmParams:
        fan_in = (in_channels + hidden) * k * k
        kw = {}
        for gate in GATES:
            kw[f"w_x{gate}"] = he_normal(gen, (hidden, in_channels, k, k), fan_in)
            kw[f"w_h{gate}"] = he_normal(gen, (hidden, hidden, k, k), fan_in)
            kw[f"b_{gate}"] = T.zeros((1, hidden, 1, 1), requires_grad=True)
        return cls(hidden_channels=hidden, **kw)

    @classmethod
    def zeros(cls, in_channels: int, hidden: int, k: int = 3) -> ConvLstmParams:
        kw = {}
        for gate in GATES:
            kw[f"w_x{gate}"] = T.zeros((hidden, in_channels, k, k), requires_grad=True)
            kw[f"w_h{gate}"] = T.zeros((hidden, hidden, k, k), requires_grad=True)
            kw[f"b_{gate}"] = T.zeros((1, hidden, 1, 1), requires_grad=True)
        return cls(hidden_channels=hidden, **kw)

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "hidden_channels"}

    @property
    def in_channels(self) -> int:
        return self.w_xi.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.w_xi.shape[2]


def convlstm_gates(p: ConvLstmParams, x: Tensor, h: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Gate activations (i, f, o, g) for input ``x`` and previous hidden state ``h``.

    All four gates share one convolution: kernels are stacked along the output
    axis, and ``x``/``h`` along the input axis. ``h=None`` means the zero state,
    whose hidden-to-hidden term vanishes.
    """
    hid = p.hidden_channels
    if x.shape[1] != p.in_channels:
        raise DimensionError(f"convlstm: input has {x.shape[1]} channels, cell expects {p.in_channels}")
    wx = T.concat([p.w_xi, p.w_xf, p.w_xo, p.w_xg], axis=0)
    bias = T.concat_channels([p.b_i, p.b_f, p.b_o, p.b_g])
    if h is None:
        z = T.conv2d(x, wx, bias, stride=1, pad=p.kernel_size // 2)
    else:
        if h.shape != (x.shape[0], hid, x.shape[2], x.shape[3]):
            raise DimensionError(f"convlstm: hidden state {h.shape} does not match input {x.shape} / {hid} channels")
        wh = T.concat([p.w_hi, p.w_hf, p.w_ho, p.w_hg], axis=0)
        w = T.concat([wx, wh], axis=1)
        z = T.conv2d(T.concat_channels([x, h]), w, bias, stride=1, pad=p.kernel_size // 2)
    i = T.sigmoid(T.slice_channels(z, 0, hid))
    f = T.sigmoid(T.slice_channels(z, hid, 2 * hid))
    o = T.sigmoid(T.slice_channels(z, 2 * hid, 3 * hid))
    g = T.tanh(T.slice_channels(z, 3 * hid, 4 * hid))
    return i, f, o, g


def convlstm_step(p: ConvLstmParams, x: Tensor, h: Tensor | None = None, c: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """One ConvLSTM update; ``None`` states stand for zeros. Returns ``(h', c')``."""
    i, f, o, g = convlstm_gates(p, x, h)
    if c is not None and c.shape != i.shape:
        raise DimensionError(f"convlstm: cell state {c.shape} does not match {i.shape}")
    c_new = T.mul(i, g) if c is None else T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


def bidirectional_run(fwd: ConvLstmParams, bwd: ConvLstmParams, seq: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Final hidden states of ``fwd`` over ``seq`` and of ``bwd`` over ``reversed(seq)``."""
    if not seq:
        raise ContractError("bidirectional_run needs a non-empty sequence")
    for s in seq[1:]:
        if s.shape != seq[0].shape:
            raise DimensionError(f"sequence elements differ in shape: {seq[0].shape} vs {s.shape}")

    def run(p: ConvLstmParams, items) -> Tensor:
        h = c = None
        for x in items:
            h, c = convlstm_step(p, x, h, c)
        return h

    return run(fwd, seq), run(bwd, list(reversed(seq)))


@dataclass
class SkipFusionParams:
    forward: ConvLstmParams
    backward: ConvLstmParams
    fuse_w: Tensor
    fuse_b: Tensor

    @classmethod
    def init(cls, gen: np.random.Generator, in_channels: int, hidden: int, out_channels: int) -> SkipFusionParams:
        fwd = ConvLstmParams.init(gen, in_channels, hidden)
        bwd = ConvLstmParams.init(gen, in_channels, hidden)
        w, b = conv_params(gen, 2 * hidden, out_channels)
        return cls(fwd, bwd, w, b)

    def tensors(self) -> dict[str, Tensor]:
        out = {f"fwd.{k}": v for k, v in self.forward.tensors().items()}
        out.update({f"bwd.{k}": v for k, v in self.backward.tensors().items()})
        out["fuse.w"] = self.fuse_w
        out["fuse.b"] = self.fuse_b
        return out


def skip_fuse(p: SkipFusionParams, enc_feat: Tensor, dec_feat: Tensor) -> Tensor:
    """Run the (encoder, decoder) pair through both LSTM directions and fuse with a 3x3 conv + ReLU."""
    if enc_feat.shape != dec_feat.shape:
        raise DimensionError(f"skip_fuse: encoder {enc_feat.shape} and decoder {dec_feat.shape} differ")
    h_fwd, h_bwd = bidirectional_run(p.forward, p.backward, [enc_feat, dec_feat])
    both = T.concat_channels([h_fwd, h_bwd])
    return T.relu(T.conv2d(both, p.fuse_w, p.fuse_b, stride=1, pad=1))
