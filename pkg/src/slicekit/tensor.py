"""Dense (C, H, W) float32 feature maps and the layer kernels that act on them.

The public single-tensor API (:func:`forward`, :func:`backward`,
:func:`max_pool_2x2`, :func:`nn_upsample_2x`) wraps batched kernels that work
on ``(N, C, H, W)`` arrays of any float dtype. Training uses the batched
kernels directly; gradient checks run them in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from slicekit.errors import OddSpatialDims, ShapeMismatch

DTYPE = np.float32

Shape = tuple  # (channels, height, width)


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable rank-3 feature map stored channel-major, then row-major."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=DTYPE)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeMismatch("tensor", "(C, H, W) with positive dims", arr.shape)
        if not np.isfinite(arr).all():
            raise ValueError("tensor holds non-finite values")
        if arr is self.data and arr.flags.writeable:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, channels: int, height: int, width: int, values) -> "Tensor":
        flat = np.asarray(values, dtype=DTYPE).ravel()
        if flat.size != channels * height * width:
            raise ShapeMismatch("tensor", channels * height * width, flat.size)
        return cls(flat.reshape(channels, height, width))

    @property
    def shape(self) -> Shape:
        return tuple(int(d) for d in self.data.shape)

    @property
    def channels(self) -> int:
        return self.shape[0]

    @property
    def height(self) -> int:
        return self.shape[1]

    @property
    def width(self) -> int:
        return self.shape[2]

    @property
    def size(self) -> int:
        return int(self.data.size)

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __eq__(self, other):
        # bit-level equality; -0.0 != 0.0 on purpose
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __repr__(self):
        return f"Tensor{self.shape}"


# ---------------------------------------------------------------------------
# Layer kinds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def output_shape(self, s: Shape) -> Shape:
        c, h, w = s
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(self.name, f"spatial dims >= kernel {self.kernel}", s)
        return (self.out_channels, ho, wo)

    def param_shapes(self, s: Shape):
        return [(self.out_channels, s[0], self.kernel, self.kernel), (self.out_channels,)]

    name = "conv2d"


@dataclass(frozen=True)
class Dense:
    out_units: int

    def output_shape(self, s: Shape) -> Shape:
        if s[1] != 1 or s[2] != 1:
            raise ShapeMismatch(self.name, "(D, 1, 1) flattened input", s)
        return (self.out_units, 1, 1)

    def param_shapes(self, s: Shape):
        return [(self.out_units, s[0]), (self.out_units,)]

    name = "dense"


@dataclass(frozen=True)
class ReLU:
    name = "relu"

    def output_shape(self, s: Shape) -> Shape:
        return tuple(s)


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: int = 2

    def output_shape(self, s: Shape) -> Shape:
        c, h, w = s
        if h < self.kernel or w < self.kernel:
            raise ShapeMismatch(self.name, f"spatial dims >= {self.kernel}", s)
        return (c, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)

    name = "maxpool"


@dataclass(frozen=True)
class GlobalAvgPool:
    name = "globalavgpool"

    def output_shape(self, s: Shape) -> Shape:
        return (s[0], 1, 1)


@dataclass(frozen=True)
class Flatten:
    name = "flatten"

    def output_shape(self, s: Shape) -> Shape:
        return (s[0] * s[1] * s[2], 1, 1)


@dataclass(frozen=True)
class DeviceTL:
    """Compressing half of the transfer layer: 2x2 max pool, stride 2, no padding."""

    name = "devicetl"

    def output_shape(self, s: Shape) -> Shape:
        if s[1] % 2 or s[2] % 2:
            raise OddSpatialDims(s)
        return (s[0], s[1] // 2, s[2] // 2)


@dataclass(frozen=True)
class EdgeTL:
    """Expanding half of the transfer layer: 2x nearest-neighbour upsample."""

    name = "edgetl"

    def output_shape(self, s: Shape) -> Shape:
        return (s[0], 2 * s[1], 2 * s[2])


@dataclass(frozen=True)
class Block:
    """Opaque group of layers run in declared order; never split internally."""

    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) < 2:
            raise ValueError("a block needs at least two sub-layers")
        if any(isinstance(l, (Block, DeviceTL, EdgeTL)) for l in self.layers):
            raise ValueError("blocks may not nest or contain transfer layers")

    def output_shape(self, s: Shape) -> Shape:
        for layer in self.layers:
            s = layer.output_shape(s)
        return s

    name = "block"


LayerKind = Any  # one of the dataclasses above

PARAMETERIZED = (Conv2D, Dense)


def has_params(layer) -> bool:
    if isinstance(layer, Block):
        return any(isinstance(l, PARAMETERIZED) for l in layer.layers)
    return isinstance(layer, PARAMETERIZED)


def init_params(layer, in_shape: Shape, rng: np.random.Generator):
    """He-normal weights, zero bias. Blocks get a tuple of per-sub-layer params."""
    if isinstance(layer, Block):
        out = []
        s = in_shape
        for sub in layer.layers:
            out.append(init_params(sub, s, rng))
            s = sub.output_shape(s)
        return tuple(out)
    if not isinstance(layer, PARAMETERIZED):
        return None
    wshape, bshape = layer.param_shapes(in_shape)
    fan_in = int(np.prod(wshape[1:]))
    w = rng.standard_normal(wshape).astype(DTYPE) * DTYPE(np.sqrt(2.0 / fan_in))
    return (w, np.zeros(bshape, dtype=DTYPE))


# ---------------------------------------------------------------------------
# Batched kernels.  x is (N, C, H, W); every kernel returns (y, cache) and the
# matching backward returns (dx, grads) with grads shaped like params.
# ---------------------------------------------------------------------------

def _check_in(layer, x, expected_c=None):
    if x.ndim != 4:
        raise ShapeMismatch(layer.name, "(N, C, H, W)", x.shape)


def _conv_cols(x, k, s, p):
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
    return cols, ho, wo, x.shape


def _conv_fwd(layer: Conv2D, x, params):
    w, b = params
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(layer.name, f"{w.shape[1]} input channels", x.shape[1])
    layer.output_shape(x.shape[1:])
    cols, ho, wo, padded_shape = _conv_cols(x, layer.kernel, layer.stride, layer.padding)
    wm = w.reshape(w.shape[0], -1)
    y = cols @ wm.T + b
    y = y.transpose(0, 2, 1).reshape(x.shape[0], w.shape[0], ho, wo)
    return y, (cols, padded_shape, ho, wo)


def _conv_bwd(layer: Conv2D, cache, params, dy):
    w, _ = params
    cols, padded_shape, ho, wo = cache
    n, o = dy.shape[:2]
    k, s, p = layer.kernel, layer.stride, layer.padding
    dyr = dy.reshape(n, o, ho * wo)
    dw = np.einsum("nop,npk->ok", dyr, cols).reshape(w.shape)
    db = dyr.sum(axis=(0, 2))
    dcols = (dyr.transpose(0, 2, 1) @ w.reshape(o, -1)).reshape(n, ho, wo, w.shape[1], k, k)
    dxp = np.zeros(padded_shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if p:
        dxp = dxp[:, :, p:-p, p:-p]
    return dxp, (dw, db)


def _dense_fwd(layer: Dense, x, params):
    w, b = params
    if x.shape[2] != 1 or x.shape[3] != 1 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(layer.name, (w.shape[1], 1, 1), tuple(x.shape[1:]))
    x2 = x.reshape(x.shape[0], -1)
    y = x2 @ w.T + b
    return y.reshape(x.shape[0], -1, 1, 1), x2


def _dense_bwd(layer: Dense, cache, params, dy):
    w, _ = params
    x2 = cache
    dy2 = dy.reshape(dy.shape[0], -1)
    dw = dy2.T @ x2
    db = dy2.sum(axis=0)
    dx = (dy2 @ w).reshape(x2.shape[0], -1, 1, 1)
    return dx, (dw, db)


def _relu_fwd(layer, x, params):
    return np.maximum(x, 0).astype(x.dtype, copy=False), x > 0


def _relu_bwd(layer, mask, params, dy):
    return dy * mask, None


def _pool_windows(x, k, s):
    n, c, h, w = x.shape
    if k == s:
        ho, wo = h // k, w // k
        return (x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
                .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return win.reshape(n, c, win.shape[2], win.shape[3], k * k)


def _pool_fwd_general(x, k, s):
    n, c, h, w = x.shape
    if k == s == 2:
        # elementwise maxima over strided views are far cheaper than a
        # multi-axis reduction, and max is exact so the result is identical
        ho, wo = h // 2 * 2, w // 2 * 2
        rows = np.maximum(x[:, :, 0:ho:2, :wo], x[:, :, 1:ho:2, :wo])
        return np.maximum(rows[..., 0::2], rows[..., 1::2])
    return _pool_windows(x, k, s).max(axis=-1)


def _pool_bwd_general(x, k, s, dy):
    # argmax returns the first maximal index: row-major tie-break inside the window
    idx = _pool_windows(x, k, s).argmax(axis=-1)
    dx = np.zeros(x.shape, dtype=dy.dtype)
    ho, wo = dy.shape[2:]
    for i in range(k):
        for j in range(k):
            sel = idx == i * k + j
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(sel, dy, 0)
    return dx


def _maxpool_fwd(layer: MaxPool, x, params):
    layer.output_shape(x.shape[1:])
    return _pool_fwd_general(x, layer.kernel, layer.stride), x


def _maxpool_bwd(layer: MaxPool, x, params, dy):
    return _pool_bwd_general(x, layer.kernel, layer.stride, dy), None


def _devtl_fwd(layer, x, params):
    layer.output_shape(x.shape[1:])
    return _pool_fwd_general(x, 2, 2), x


def _devtl_bwd(layer, x, params, dy):
    return _pool_bwd_general(x, 2, 2, dy), None


def _edgetl_fwd(layer, x, params):
    return x.repeat(2, axis=2).repeat(2, axis=3), None


def _edgetl_bwd(layer, cache, params, dy):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)), None


def _gap_fwd(layer, x, params):
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def _gap_bwd(layer, in_shape, params, dy):
    hw = in_shape[2] * in_shape[3]
    return np.broadcast_to(dy / dy.dtype.type(hw), in_shape).copy(), None


def _flatten_fwd(layer, x, params):
    return x.reshape(x.shape[0], -1, 1, 1), x.shape


def _flatten_bwd(layer, in_shape, params, dy):
    return dy.reshape(in_shape), None


def _block_fwd(layer: Block, x, params):
    params = params if params is not None else (None,) * len(layer.layers)
    caches = []
    for sub, p in zip(layer.layers, params):
        x, c = forward_batch(sub, x, p)
        caches.append(c)
    return x, caches


def _block_bwd(layer: Block, caches, params, dy):
    params = params if params is not None else (None,) * len(layer.layers)
    grads = [None] * len(layer.layers)
    for i in reversed(range(len(layer.layers))):
        dy, grads[i] = backward_batch(layer.layers[i], caches[i], params[i], dy)
    return dy, tuple(grads)


_KERNELS = {
    Conv2D: (_conv_fwd, _conv_bwd),
    Dense: (_dense_fwd, _dense_bwd),
    ReLU: (_relu_fwd, _relu_bwd),
    MaxPool: (_maxpool_fwd, _maxpool_bwd),
    GlobalAvgPool: (_gap_fwd, _gap_bwd),
    Flatten: (_flatten_fwd, _flatten_bwd),
    DeviceTL: (_devtl_fwd, _devtl_bwd),
    EdgeTL: (_edgetl_fwd, _edgetl_bwd),
    Block: (_block_fwd, _block_bwd),
}


def forward_batch(layer, x: np.ndarray, params=None):
    _check_in(layer, x)
    if isinstance(layer, PARAMETERIZED) and params is None:
        raise ShapeMismatch(layer.name, "weights", None)
    y, cache = _KERNELS[type(layer)][0](layer, x, params)
    # one canonical layout so split and unsplit execution reduce in the same order
    return np.ascontiguousarray(y), cache


def backward_batch(layer, cache, params, dy: np.ndarray):
    return _KERNELS[type(layer)][1](layer, cache, params, dy)


# ---------------------------------------------------------------------------
# Single-tensor API
# ---------------------------------------------------------------------------

def forward(layer, input: Tensor, weights=None) -> Tensor:
    y, _ = forward_batch(layer, input.data[None], weights)
    return Tensor(y[0])


def backward(layer, input: Tensor, upstream_grad: Tensor, weights=None):
    """Return ``(input_grad, weight_grads)`` for one layer at ``input``."""
    y, cache = forward_batch(layer, input.data[None], weights)
    if y.shape[1:] != upstream_grad.shape:
        raise ShapeMismatch(layer.name, y.shape[1:], upstream_grad.shape)
    dx, grads = backward_batch(layer, cache, weights, upstream_grad.data[None])
    return Tensor(dx[0]), grads


def max_pool_2x2(input: Tensor) -> Tensor:
    if input.height % 2 or input.width % 2:
        raise OddSpatialDims(input.shape)
    c, h, w = input.shape
    return Tensor(input.data.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4)))


def nn_upsample_2x(input: Tensor) -> Tensor:
    return Tensor(input.data.repeat(2, axis=1).repeat(2, axis=2))


def run_layers(layers: Sequence, params: Sequence, x: np.ndarray) -> np.ndarray:
    """Batched inference through a layer list (no caches kept)."""
    for layer, p in zip(layers, params):
        x, _ = forward_batch(layer, x, p)
    return x
