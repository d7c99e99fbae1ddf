"""Dense tensor primitives.

Tensors are plain ``numpy.ndarray`` objects in row-major N,C,H,W layout.
Every function here is pure: inputs are never written, outputs are freshly
allocated.  Backward helpers return gradients with respect to the inputs of
the matching forward function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents or ranks do not fit an operation."""


class ConfigError(ValueError):
    """Raised for invalid kernel/stride/padding configurations."""


@dataclass(frozen=True)
class Shape4:
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("n", "c", "h", "w"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ShapeError(f"Shape4.{name} must be a positive integer, got {v!r}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)

    @classmethod
    def of(cls, t: np.ndarray) -> "Shape4":
        _require_rank(t, 4, "Shape4.of")
        return cls(*t.shape)


def _require_rank(t: np.ndarray, rank: int, op: str) -> None:
    if t.ndim != rank:
        raise ShapeError(f"{op} expects a rank-{rank} tensor, got shape {t.shape}")


def real_dtype(*xs) -> np.dtype:
    """Floating dtype for mixing the given values; bare Python numbers count as real64."""
    dt = np.result_type(*[np.asarray(x) for x in xs])
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float64)


def elementwise_map(t: np.ndarray, f: Callable[[float], float]) -> np.ndarray:
    """Apply a scalar function to every element, keeping shape and dtype."""
    t = np.asarray(t)
    out = np.empty_like(t)
    flat_in = t.reshape(-1)
    flat_out = out.reshape(-1)
    for i in range(flat_in.size):
        flat_out[i] = f(flat_in[i])
    return out


def sigmoid(x):
    """Logistic function that never overflows.

    Non-negative inputs use ``1 / (1 + exp(-x))``, negative inputs use
    ``exp(x) / (1 + exp(x))``.  NaN propagates.  Scalars in, scalar out.
    """
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    z = np.exp(-np.abs(arr))
    out = np.where(arr >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(arr.dtype, copy=False)
    # NaN fails the ``>=`` test and would take the second branch; keep it NaN.
    out = np.where(np.isnan(arr), arr, out)
    if np.ndim(x) == 0:
        return out.dtype.type(out)
    return out


def sigmoid_slope(x):
    """``sigmoid(x) * sigmoid(-x)``, i.e. s(1-s) without cancellation in 1-s."""
    return sigmoid(x) * sigmoid(-np.asarray(x))


def global_avg_pool(t: np.ndarray) -> np.ndarray:
    _require_rank(t, 4, "global_avg_pool")
    return t.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out: np.ndarray, in_shape) -> np.ndarray:
    n, c, h, w = in_shape
    return np.broadcast_to(grad_out / (h * w), (n, c, h, w)).copy()


def pointwise_conv(t: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """1x1 convolution: ``out[n,o,h,w] = sum_c weight[o,c] * t[n,c,h,w] + bias[o]``."""
    _require_rank(t, 4, "pointwise_conv")
    if weight.ndim != 2 or weight.shape[1] != t.shape[1]:
        raise ShapeError(f"pointwise_conv weight {weight.shape} does not match {t.shape[1]} input channels")
    out = np.einsum("oc,nchw->nohw", weight, t)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"pointwise_conv bias {bias.shape} != ({weight.shape[0]},)")
        out = out + bias[None, :, None, None]
    return out


def pointwise_conv_backward(t, weight, grad_out):
    """Returns (grad_t, grad_weight, grad_bias)."""
    grad_t = np.einsum("oc,nohw->nchw", weight, grad_out)
    grad_w = np.einsum("nohw,nchw->oc", grad_out, t)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_t, grad_w, grad_b


def _conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_window(k: int, stride: int, pad: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"kernel size must be odd and positive, got {k}")
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    if pad < 0 or pad > k // 2:
        raise ConfigError(f"padding must lie in [0, {k // 2}], got {pad}")


def depthwise_conv(t: np.ndarray, weight: np.ndarray, stride: int = 1, pad: Optional[int] = None) -> np.ndarray:
    """Per-channel k x k convolution with zero padding (pad defaults to k // 2)."""
    _require_rank(t, 4, "depthwise_conv")
    if weight.ndim != 3 or weight.shape[1] != weight.shape[2]:
        raise ShapeError(f"depthwise_conv weight must be (C, k, k), got {weight.shape}")
    n, c, h, w = t.shape
    if weight.shape[0] != c:
        raise ShapeError(f"depthwise_conv weight has {weight.shape[0]} channels, input has {c}")
    k = weight.shape[1]
    pad = k // 2 if pad is None else pad
    _check_window(k, stride, pad)
    ho, wo = _conv_out_extent(h, k, stride, pad), _conv_out_extent(w, k, stride, pad)
    xp = np.pad(t, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(t, weight))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            out += patch * weight[None, :, i, j, None, None]
    return out


def depthwise_conv_backward(t, weight, grad_out, stride: int = 1, pad: Optional[int] = None):
    """Returns (grad_t, grad_weight)."""
    n, c, h, w = t.shape
    k = weight.shape[1]
    pad = k // 2 if pad is None else pad
    ho, wo = grad_out.shape[2:]
    xp = np.pad(t, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gxp = np.zeros_like(xp, dtype=np.result_type(t, weight, grad_out))
    gw = np.zeros_like(weight, dtype=gxp.dtype)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None),
                  slice(i, i + stride * (ho - 1) + 1, stride),
                  slice(j, j + stride * (wo - 1) + 1, stride))
            gw[:, i, j] = np.einsum("nchw,nchw->c", grad_out, xp[sl])
            gxp[sl] += grad_out * weight[None, :, i, j, None, None]
    return gxp[:, :, pad : pad + h, pad : pad + w], gw


def conv2d(t: np.ndarray, weight: np.ndarray, stride: int = 1, pad: Optional[int] = None) -> np.ndarray:
    """Dense k x k convolution, weight (C_out, C_in, k, k), zero padding."""
    _require_rank(t, 4, "conv2d")
    if weight.ndim != 4 or weight.shape[1] != t.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight {weight.shape} does not fit input {t.shape}")
    n, c, h, w = t.shape
    k = weight.shape[2]
    pad = k // 2 if pad is None else pad
    _check_window(k, stride, pad)
    ho, wo = _conv_out_extent(h, k, stride, pad), _conv_out_extent(w, k, stride, pad)
    xp = np.pad(t, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, weight.shape[0], ho, wo), dtype=np.result_type(t, weight))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            out += np.einsum("oc,nchw->nohw", weight[:, :, i, j], patch)
    return out


def conv2d_backward(t, weight, grad_out, stride: int = 1, pad: Optional[int] = None):
    """Returns (grad_t, grad_weight)."""
    n, c, h, w = t.shape
    k = weight.shape[2]
    pad = k // 2 if pad is None else pad
    ho, wo = grad_out.shape[2:]
    xp = np.pad(t, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gxp = np.zeros_like(xp, dtype=np.result_type(t, weight, grad_out))
    gw = np.zeros_like(weight, dtype=gxp.dtype)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None),
                  slice(i, i + stride * (ho - 1) + 1, stride),
                  slice(j, j + stride * (wo - 1) + 1, stride))
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", grad_out, xp[sl])
            gxp[sl] += np.einsum("oc,nohw->nchw", weight[:, :, i, j], grad_out)
    return gxp[:, :, pad : pad + h, pad : pad + w], gw


def max_pool2(t: np.ndarray, kernel: int = 2, stride: int = 2, pad: int = 0) -> np.ndarray:
    """Spatial max pooling.  The default is the plain 2x2/stride-2 window;
    ``kernel=3, pad=1`` gives the shape-matched downsampling used by
    ACON-FReLU blocks.  Padding cells never win the max."""
    _require_rank(t, 4, "max_pool2")
    return _max_pool(t, kernel, stride, pad)[0]


def _max_pool(t, kernel, stride, pad):
    if kernel < 1 or stride < 1 or pad < 0 or pad >= kernel:
        raise ConfigError(f"invalid pooling window k={kernel} s={stride} p={pad}")
    n, c, h, w = t.shape
    ho, wo = _conv_out_extent(h, kernel, stride, pad), _conv_out_extent(w, kernel, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2 window larger than input {t.shape}")
    xp = np.pad(t, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    best = np.full((n, c, ho, wo), -np.inf, dtype=t.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    for i in range(kernel):
        for j in range(kernel):
            patch = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            better = patch > best
            best = np.where(better, patch, best)
            arg = np.where(better, i * kernel + j, arg)
    return best, arg


def max_pool2_backward(t, grad_out, kernel: int = 2, stride: int = 2, pad: int = 0):
    """Routes each output gradient to the first maximal element of its window."""
    _, arg = _max_pool(t, kernel, stride, pad)
    n, c, h, w = t.shape
    ho, wo = grad_out.shape[2:]
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    for i in range(kernel):
        for j in range(kernel):
            sl = (slice(None), slice(None),
                  slice(i, i + stride * (ho - 1) + 1, stride),
                  slice(j, j + stride * (wo - 1) + 1, stride))
            gxp[sl] += np.where(arg == i * kernel + j, grad_out, 0)
    return gxp[:, :, pad : pad + h, pad : pad + w]


def dense(t: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-wise affine map ``t @ weight.T + bias``."""
    _require_rank(t, 2, "dense")
    if weight.ndim != 2 or weight.shape[1] != t.shape[1]:
        raise ShapeError(f"dense weight {weight.shape} does not match input width {t.shape[1]}")
    out = t @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense bias {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out


def dense_backward(t, weight, grad_out):
    """Returns (grad_t, grad_weight, grad_bias)."""
    return grad_out @ weight, grad_out.T @ t, grad_out.sum(axis=0)
