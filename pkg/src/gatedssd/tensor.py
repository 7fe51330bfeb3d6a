"""Dense NCHW float32 primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects (float32, C-contiguous, 4-D for
feature maps). Every ``*_backward`` takes the forward inputs plus the upstream
gradient and returns gradients with the same shapes as the forward inputs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from gatedssd import kernels
from gatedssd.errors import DegenerateSpecError, ShapeError

DTYPE = np.float32

_num_threads = 1


def set_num_threads(n: int) -> None:
    """Set the thread count used by :func:`compute_threads` (default 1)."""
    global _num_threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = n


def get_num_threads() -> int:
    return _num_threads


@contextlib.contextmanager
def compute_threads(n: int | None = None):
    """Limit BLAS/OpenMP pools for the enclosed block.

    Single-threaded by default, which makes results bitwise reproducible.
    """
    with threadpool_limits(limits=n or _num_threads):
        yield


def as_tensor(x, name: str = "input", ndim: int = 4) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    depthwise: bool = False

    def __post_init__(self):
        for name in ("kernel", "stride", "padding"):
            value = getattr(self, name)
            if isinstance(value, int):
                object.__setattr__(self, name, (value, value))
        if self.in_channels < 1 or self.out_channels < 1:
            raise DegenerateSpecError("channel counts must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise DegenerateSpecError(
                f"invalid kernel/stride/padding {self.kernel}/{self.stride}/{self.padding}")
        if self.depthwise and self.out_channels % self.in_channels:
            raise DegenerateSpecError(
                "depthwise conv needs out_channels to be an integer multiple of in_channels")

    @property
    def in_per_group(self) -> int:
        return 1 if self.depthwise else self.in_channels

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_per_group, *self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if h + 2 * ph < kh or w + 2 * pw < kw or oh < 1 or ow < 1:
            raise DegenerateSpecError(
                f"conv {self.kernel} stride {self.stride} pad {self.padding} "
                f"on {h}x{w} input gives an empty output")
        return oh, ow

    def output_shape(self, input_shape) -> tuple[int, ...]:
        *lead, c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        return (*lead, self.out_channels, *self.output_hw(h, w))


@dataclass
class MacCounter:
    """Accumulates multiply-accumulates actually executed, by layer name."""

    total: int = 0
    layers: list = field(default_factory=list)

    def add(self, name: str, macs: int) -> None:
        self.total += int(macs)
        self.layers.append((name, int(macs)))


def count_macs(spec: ConvSpec, input_shape) -> int:
    """Exact MAC count of one conv: output elements x (kh*kw*in_channels_per_group).

    ``input_shape`` is (C, H, W) or (N, C, H, W).
    """
    shape = tuple(input_shape)
    n = shape[0] if len(shape) == 4 else 1
    out = spec.output_shape(shape[-3:])
    kh, kw = spec.kernel
    return n * out[0] * out[1] * out[2] * kh * kw * spec.in_per_group


def dense_macs(in_features: int, out_features: int, batch: int = 1) -> int:
    return batch * in_features * out_features


def _check_conv_args(x, w, b, spec):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-D, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv expected {spec.in_channels} input channels, got {x.shape[1]}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"conv weight shape {w.shape} != {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeError(f"conv bias shape {b.shape} != ({spec.out_channels},)")


def _is_pointwise(spec):
    return (not spec.depthwise and spec.kernel == (1, 1)
            and spec.stride == (1, 1) and spec.padding == (0, 0))


def conv2d_forward(x, w, b, spec: ConvSpec, macs: MacCounter | None = None, name: str = "conv"):
    _check_conv_args(x, w, b, spec)
    N, _, H, W = x.shape
    OH, OW = spec.output_hw(H, W)
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    if spec.depthwise:
        out = kernels.active.depthwise_forward(x, w, b, sh, sw, ph, pw)
    elif _is_pointwise(spec):
        out = np.matmul(w.reshape(spec.out_channels, -1), x.reshape(N, spec.in_channels, H * W))
        out = out.reshape(N, spec.out_channels, OH, OW)
        out += b[None, :, None, None]
    else:
        cols = kernels.active.im2col(x, kh, kw, sh, sw, ph, pw)
        out = np.matmul(w.reshape(spec.out_channels, -1), cols)
        out = out.reshape(N, spec.out_channels, OH, OW)
        out += b[None, :, None, None]
    if macs is not None:
        macs.add(name, out.size * w.shape[1] * w.shape[2] * w.shape[3])
    return out


def conv2d_backward(x, w, spec: ConvSpec, dy):
    """Return (dx, dw, db) for ``conv2d_forward(x, w, b, spec)``."""
    _check_conv_args(x, w, None, spec)
    N, C, H, W = x.shape
    OH, OW = spec.output_hw(H, W)
    if dy.shape != (N, spec.out_channels, OH, OW):
        raise ShapeError(f"upstream gradient shape {dy.shape} != {(N, spec.out_channels, OH, OW)}")
    dy = np.ascontiguousarray(dy, dtype=DTYPE)
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    db = dy.sum(axis=(0, 2, 3), dtype=DTYPE)
    if spec.depthwise:
        dx, dw = kernels.active.depthwise_backward(x, w, dy, sh, sw, ph, pw)
        return dx, dw, db
    O = spec.out_channels
    dy_flat = dy.reshape(N, O, OH * OW)
    w_flat = w.reshape(O, -1)
    if _is_pointwise(spec):
        cols = x.reshape(N, C, H * W)
    else:
        cols = kernels.active.im2col(x, kh, kw, sh, sw, ph, pw)
    dw = np.matmul(dy_flat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    dcols = np.matmul(w_flat.T, dy_flat)
    if _is_pointwise(spec):
        dx = dcols.reshape(N, C, H, W)
    else:
        dx = kernels.active.col2im(np.ascontiguousarray(dcols), N, C, H, W, kh, kw, sh, sw, ph, pw)
    return dx, dw.astype(DTYPE, copy=False), db


def dense_forward(x, w, b, macs: MacCounter | None = None, name: str = "dense"):
    """Affine map ``x @ w.T + b``; ``x`` is (N, in) or (in,), ``w`` is (out, in)."""
    x = np.asarray(x, dtype=DTYPE)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense input length {x.shape[-1]} != weight columns {w.shape[-1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense bias shape {b.shape} != ({w.shape[0]},)")
    out = x @ w.T + b
    if macs is not None:
        macs.add(name, out.size * w.shape[1])
    return out


def dense_backward(x, w, dy):
    x2 = np.atleast_2d(x)
    dy2 = np.atleast_2d(dy)
    dx = (dy2 @ w).reshape(np.shape(x))
    return dx, dy2.T @ x2, dy2.sum(axis=0)


def global_avg_pool(x):
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"global pooling needs a non-empty 4-D map, got {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True, dtype=DTYPE)


def global_avg_pool_backward(x_shape, dy):
    N, C, H, W = x_shape
    g = np.asarray(dy, dtype=DTYPE).reshape(N, C, 1, 1) / DTYPE(H * W)
    return np.broadcast_to(g, x_shape).astype(DTYPE)


def relu(x):
    return np.maximum(x, 0).astype(DTYPE, copy=False)


def relu_backward(x, dy):
    return np.where(x > 0, dy, 0).astype(DTYPE, copy=False)


def sigmoid(x):
    # tanh form avoids overflow in exp for large |x|
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(DTYPE, copy=False)


def sigmoid_backward(x, dy):
    s = sigmoid(x)
    return dy * s * (1 - s)


def swish(x):
    return x * sigmoid(x)


def swish_backward(x, dy):
    s = sigmoid(x)
    return dy * (s + x * s * (1 - s))


def softmax(logits, axis: int = -1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y, dy, axis: int = -1):
    """Gradient through softmax given its output ``y``."""
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def log_softmax(logits, axis: int = -1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


ACTIVATIONS = {
    "swish": (swish, swish_backward),
    "relu": (relu, relu_backward),
    "linear": (lambda x: x, lambda x, dy: dy),
}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None
