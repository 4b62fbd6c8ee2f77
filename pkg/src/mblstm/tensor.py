"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every value is a 4-D array ``(batch, channels, height, width)`` stored row-major.
Operations record their inputs and a closure that maps the output gradient to
input gradients; :func:`backward` walks the recorded graph in reverse
topological order.

Weights use the same container: a convolution kernel is ``(Cout, Cin, k, k)``
and a bias is ``(1, Cout, 1, 1)``. The only broadcast in the engine is that of
a bias over batch and space inside :func:`conv2d`.

Random numbers come from numpy's Philox4x64 counter-based bit generator
(``numpy.random.Philox``) keyed by the integer seed; normal variates use
numpy's ziggurat sampler (``Generator.standard_normal``) in float64, cast to
the active precision afterwards.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "set_precision",
    "get_precision",
    "precision",
    "no_grad",
    "randn",
    "zeros",
    "ones",
    "tensor",
    "conv2d",
    "relu",
    "sigmoid",
    "tanh",
    "maxpool2",
    "avgpool_down",
    "upsample2_nearest",
    "concat",
    "concat_channels",
    "slice_channels",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "spatial_sum",
    "sum_all",
    "mean_all",
    "backward",
    "zero_grad",
]

_DTYPES = {"single": np.float32, "double": np.float64}
_precision = "double"
_grad_enabled = True


def set_precision(mode: str) -> None:
    """Select the global floating point mode: ``"single"`` or ``"double"``."""
    global _precision
    if mode not in _DTYPES:
        raise ContractError(f"precision must be 'single' or 'double', got {mode!r}")
    _precision = mode


def get_precision() -> str:
    return _precision


def dtype() -> type:
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the global precision mode."""
    previous = _precision
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A 4-D array plus optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=dtype())
        if arr.ndim != 4:
            raise DimensionError(f"tensors are 4-D (N, C, H, W); got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype()), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=dtype()), requires_grad=requires_grad)


def rng(seed: int) -> np.random.Generator:
    """Seeded Philox generator used everywhere randomness is needed."""
    return np.random.Generator(np.random.Philox(int(seed)))


def randn(shape: Sequence[int], seed: int, requires_grad: bool = False) -> Tensor:
    """Standard normal tensor, bit-reproducible for a given (shape, seed)."""
    values = rng(seed).standard_normal(tuple(shape), dtype=np.float64)
    return Tensor(values, requires_grad=requires_grad)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError(f"{op}: non-finite value in input")


def _same_shape(op: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{op}: shapes {x.shape} and {y.shape} differ")


# --------------------------------------------------------------------------- conv


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, Cin, H, W) with ``w`` (Cout, Cin, k, k)."""
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d: stride must be >= 1 and pad >= 0 (stride={stride}, pad={pad})")
    if b is not None and b.shape != (1, cout, 1, 1):
        raise DimensionError(f"conv2d: bias shape {b.shape}, expected (1, {cout}, 1, 1)")
    k = kh
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {h}x{wd}")
    _check_finite("conv2d", x.data, w.data)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    if stride > 1:
        windows = windows[:, :, ::stride, ::stride]
    windows = windows[:, :, :ho, :wo]
    # rows: (cin, ky, kx); columns: (n, y, x) -- keeps the copy's inner loop contiguous
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(cin * k * k, n * ho * wo)
    wmat = w.data.reshape(cout, cin * k * k)
    out = wmat @ cols
    if b is not None:
        out += b.data.reshape(cout, 1)
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def back(g: np.ndarray):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(cin, k, k, n, ho, wo)
            gxp = np.zeros((cin, n) + xp.shape[2:], dtype=g.dtype)
            ys = stride * (ho - 1) + 1
            xs = stride * (wo - 1) + 1
            for ky in range(k):
                for kx in range(k):
                    gxp[:, :, ky:ky + ys:stride, kx:kx + xs:stride] += gcols[:, ky, kx]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, back)


# ------------------------------------------------------------------ activations


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x.data)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)
    return _result(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function; output is clipped so it stays strictly inside (0, 1)."""
    _check_finite("sigmoid", x.data)
    d = x.data
    half = d.dtype.type(0.5)
    out = np.tanh(d * half)
    out *= half
    out += half
    info = np.finfo(d.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    """Hyperbolic tangent, clipped so it stays strictly inside (-1, 1)."""
    _check_finite("tanh", x.data)
    out = np.tanh(x.data)
    lim = 1.0 - np.finfo(out.dtype).epsneg
    np.clip(out, -lim, lim, out=out)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


# ------------------------------------------------------------ resampling ops


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties send the gradient to the first element in scan order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g: np.ndarray):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), back)


def avgpool_down(x: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor x factor`` windows."""
    n, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise DimensionError(f"avgpool_down: {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return _result(x.data.copy(), (x,), lambda g: (g,))
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    inv = 1.0 / (factor * factor)

    def back(g: np.ndarray):
        gx = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) * inv
        return (gx.astype(g.dtype, copy=False),)

    return _result(out, (x,), back)


def upsample2_nearest(x: Tensor) -> Tensor:
    """Duplicate every pixel into a 2x2 block."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g: np.ndarray):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), back)


# --------------------------------------------------------- structural ops


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; all other dims must match."""
    if not xs:
        raise ContractError("concat: empty list")
    ref = xs[0].shape
    for t in xs[1:]:
        if len(t.shape) != 4 or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} are incompatible")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def back(g: np.ndarray):
        index = [slice(None)] * 4
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return _result(out, tuple(xs), back)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=1)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise DimensionError(f"slice_channels: [{start}, {stop}) out of range for {c} channels")
    out = x.data[:, start:stop]

    def back(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), back)


# ------------------------------------------------------------- arithmetic


def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("add", x, y)
    return _result(x.data + y.data, (x, y), lambda g: (g, g))


def sub(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("sub", x, y)
    return _result(x.data - y.data, (x, y), lambda g: (g, -g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("mul", x, y)
    return _result(x.data * y.data, (x, y), lambda g: (g * y.data, g * x.data))


def div(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("div", x, y)
    out = x.data / y.data
    return _result(out, (x, y), lambda g: (g / y.data, -g * out / y.data))


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.data.dtype.type(factor)
    return _result(x.data * f, (x,), lambda g: (g * f,))


def add_scalar(x: Tensor, value: float) -> Tensor:
    return _result(x.data + x.data.dtype.type(value), (x,), lambda g: (g,))


def spatial_sum(x: Tensor) -> Tensor:
    """Sum over H and W, keeping an (N, C, 1, 1) shape."""
    out = x.data.sum(axis=(2, 3), keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum().reshape(1, 1, 1, 1)
    return _result(out, (x,), lambda g: (np.full(x.shape, g.reshape(()), dtype=g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


# ------------------------------------------------------------------ backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tracked tensor reachable from a scalar loss.

    Gradients are not accumulated across calls: a second call on the same
    graph, or on a graph whose leaves still hold gradients, raises
    :class:`ContractError`. Use :func:`zero_grad` between steps.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a 1x1x1x1 loss, got {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor requiring grad")
    if loss._consumed:
        raise ContractError("backward already ran on this graph")
    order = _topological(loss)
    for node in order:
        if node.is_leaf and node.grad is not None:
            raise ContractError(f"leaf {node.name or node!r} already holds a gradient; call zero_grad first")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    loss._consumed = True


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
