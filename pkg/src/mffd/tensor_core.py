"""Dense CHW tensors and the seven layer kernels every network variant is built from.

A tensor here is a plain numpy array of shape (channels, height, width),
row-major, float32 during normal inference and float64 when we want
gradient-check precision. Kernels are pure functions: they never mutate
their inputs and always return freshly allocated arrays, so tensors can be
shared freely between concurrent callers.

``conv2d`` is the readable reference path, written as a direct sum over
filter taps. ``conv2d_fast`` is the im2col + matrix-multiply path used by
the network executor; the two must agree to float32 round-off and the test
suite holds them to that.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "ConvWeights",
    "BNParams",
    "conv2d",
    "conv2d_fast",
    "batchnorm_infer",
    "relu",
    "maxpool2x2",
    "upsample2x_nearest",
    "concat_channels",
]


def check_chw(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Reject anything that is not a non-empty 3-d (C, H, W) array."""
    if not isinstance(x, np.ndarray) or x.ndim != 3:
        raise ShapeError(f"{what}: expected a (channels, height, width) array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) < 1:
        raise ShapeError(f"{what}: zero-sized dimension in shape {x.shape}")
    return x


@dataclass(frozen=True)
class ConvWeights:
    """Filter bank of a convolution layer.

    ``weights`` has shape (out_channels, in_channels, k, k); its memory layout
    is therefore flat [out][in][ky][kx]. ``bias`` has one entry per output
    channel and may be all-zero.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w, b = self.weights, self.bias
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv weights must be (out, in, k, k), got {w.shape}")
        if w.shape[2] not in (1, 3):
            raise ShapeError(f"kernel size must be 1 or 3, got {w.shape[2]}")
        if min(w.shape[:2]) < 1:
            raise ShapeError(f"conv weights have empty channel dimension: {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    @staticmethod
    def zeros(out_channels: int, in_channels: int, kernel: int, dtype=np.float32) -> "ConvWeights":
        return ConvWeights(
            np.zeros((out_channels, in_channels, kernel, kernel), dtype=dtype),
            np.zeros(out_channels, dtype=dtype),
        )


@dataclass(frozen=True)
class BNParams:
    """Per-channel batch-norm statistics and affine parameters (inference form)."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "mean", "var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"batchnorm {name} shape {getattr(self, name).shape} != gamma shape {c}")
        if self.gamma.ndim != 1:
            raise ShapeError(f"batchnorm parameters must be 1-d per-channel vectors, got {c}")
        if np.any(self.var < 0):
            raise ShapeError("batchnorm variance must be non-negative")
        if self.eps < 0:
            raise ShapeError("batchnorm epsilon must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @staticmethod
    def identity(channels: int, dtype=np.float32, eps: float = 1e-5) -> "BNParams":
        return BNParams(
            np.ones(channels, dtype=dtype),
            np.zeros(channels, dtype=dtype),
            np.zeros(channels, dtype=dtype),
            np.ones(channels, dtype=dtype),
            eps,
        )


def conv_out_size(size: int, kernel: int, stride: int, pad: str) -> int:
    """Spatial output size of a convolution along one axis."""
    if pad == "same":
        return -(-size // stride)
    if pad == "none":
        if size < kernel:
            raise ShapeError(f"input size {size} smaller than kernel {kernel} with pad=none")
        return (size - kernel) // stride + 1
    raise ValueError(f"pad must be 'same' or 'none', got {pad!r}")


def _pad_amounts(size: int, kernel: int, stride: int) -> tuple[int, int]:
    # 'same' padding: enough zeros that out == ceil(in / stride), with the
    # window anchored so the first output is centred on row/col 0.
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    before = min((kernel - 1) // 2, total)
    return before, total - before


def _conv_geometry(x: np.ndarray, w: ConvWeights, stride: int, pad: str):
    check_chw(x, "conv input")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.shape[0] != w.in_channels:
        raise ShapeError(f"conv input has {x.shape[0]} channels, weights expect {w.in_channels}")
    k = w.kernel
    if pad == "same" and k == 1:
        pad = "none"  # 1x1 windows never need padding; sizes still round up
        oh, ow = -(-x.shape[1] // stride), -(-x.shape[2] // stride)
        return pad, oh, ow, (0, 0), (0, 0)
    oh = conv_out_size(x.shape[1], k, stride, pad)
    ow = conv_out_size(x.shape[2], k, stride, pad)
    if pad == "same":
        ph = _pad_amounts(x.shape[1], k, stride)
        pw = _pad_amounts(x.shape[2], k, stride)
    else:
        ph = pw = (0, 0)
    return pad, oh, ow, ph, pw


def pad_input(x: np.ndarray, ph: tuple[int, int], pw: tuple[int, int]) -> np.ndarray:
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw))


def conv2d(x: np.ndarray, w: ConvWeights, stride: int = 1, pad: str = "same") -> np.ndarray:
    """2-d cross-correlation, reference path.

    One scalar filter tap at a time: out[co] = bias[co] + sum over (ci, ky, kx)
    of weights[co, ci, ky, kx] * the correspondingly shifted input window.
    """
    _, oh, ow, ph, pw = _conv_geometry(x, w, stride, pad)
    xp = pad_input(x, ph, pw)
    k, s = w.kernel, stride
    out = np.empty((w.out_channels, oh, ow), dtype=x.dtype)
    for co in range(w.out_channels):
        acc = np.full((oh, ow), w.bias[co], dtype=x.dtype)
        for ci in range(w.in_channels):
            plane = xp[ci]
            for ky in range(k):
                for kx in range(k):
                    acc += w.weights[co, ci, ky, kx] * plane[ky : ky + (oh - 1) * s + 1 : s, kx : kx + (ow - 1) * s + 1 : s]
        out[co] = acc
    return out


def im2col(xp: np.ndarray, kernel: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Unfold a padded (C, H, W) array to (C * k * k, oh * ow) patch columns."""
    win = sliding_window_view(xp, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :oh, :ow]
    c = xp.shape[0]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kernel * kernel, oh * ow)


def conv2d_fast(
    x: np.ndarray,
    w: ConvWeights,
    stride: int = 1,
    pad: str = "same",
    _cache: dict | None = None,
) -> np.ndarray:
    """Same contract as :func:`conv2d`, computed as one im2col matrix product.

    ``_cache``, when given, receives the layer's column matrix under key
    ``"cols"`` so a training step can reuse it for the weight gradient.
    """
    _, oh, ow, ph, pw = _conv_geometry(x, w, stride, pad)
    k = w.kernel
    if k == 1 and stride == 1:
        cols = x.reshape(w.in_channels, -1)
    else:
        cols = im2col(pad_input(x, ph, pw), k, stride, oh, ow)
    y = w.weights.reshape(w.out_channels, -1) @ cols
    y += w.bias[:, None]
    if _cache is not None:
        _cache["cols"] = cols
    return y.reshape(w.out_channels, oh, ow)


def batchnorm_infer(x: np.ndarray, p: BNParams) -> np.ndarray:
    """gamma * (x - mean) / sqrt(var + eps) + beta, per channel."""
    check_chw(x, "batchnorm input")
    if x.shape[0] != p.channels:
        raise ShapeError(f"batchnorm input has {x.shape[0]} channels, parameters have {p.channels}")
    scale = p.gamma / np.sqrt(p.var + x.dtype.type(p.eps))
    shift = p.beta - p.mean * scale
    return x * scale[:, None, None] + shift[:, None, None]


def relu(x: np.ndarray) -> np.ndarray:
    check_chw(x, "relu input")
    return np.maximum(x, 0)


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling with stride 2. Spatial dims must be even."""
    check_chw(x, "maxpool input")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    return np.maximum(
        np.maximum(x[:, 0::2, 0::2], x[:, 0::2, 1::2]),
        np.maximum(x[:, 1::2, 0::2], x[:, 1::2, 1::2]),
    )


def upsample2x_nearest(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling: every element becomes a 2x2 block."""
    check_chw(x, "upsample input")
    return x.repeat(2, axis=1).repeat(2, axis=2)


def concat_channels(parts: list[np.ndarray] | tuple[np.ndarray, ...]) -> np.ndarray:
    """Stack tensors along the channel axis; spatial dims must agree.

    Zero-channel members are legal and contribute nothing.
    """
    if len(parts) < 1:
        raise ShapeError("concat needs at least one input")
    hw = None
    for p in parts:
        if p.ndim != 3:
            raise ShapeError(f"concat input must be 3-d, got shape {getattr(p, 'shape', None)}")
        if p.shape[0] > 0:
            if hw is None:
                hw = p.shape[1:]
            elif p.shape[1:] != hw:
                raise ShapeError(f"concat spatial mismatch: {p.shape[1:]} vs {hw}")
    if hw is None:
        raise ShapeError("concat inputs are all empty")
    return np.concatenate([p for p in parts if p.shape[0] > 0], axis=0)
