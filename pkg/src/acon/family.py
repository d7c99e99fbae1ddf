"""ACON-A/B/C activations, their analytic gradients and the first-derivative bounds.

All three are the two-argument smooth maximum of two linear functions of
``x``:

* ACON-A: ``x * sigmoid(beta x)``                       (Swish)
* ACON-B: ``(1-p) x * sigmoid(beta (1-p) x) + p x``       (smoothed PReLU)
* ACON-C: ``(p1-p2) x * sigmoid(beta (p1-p2) x) + p2 x``

Parameters are per channel and broadcast over every other axis (channel is
axis 1 for both N,C and N,C,H,W inputs).  ACON-FReLU swaps the linear pieces
for a max-pool/identity branch and a depthwise-conv branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .smoothmax import smooth_max2, smooth_max2_grad
from .tensor import ShapeError, sigmoid, sigmoid_slope

ACON_KINDS = ("A", "B", "C")


class DomainError(ValueError):
    """Raised when a closed-form result is undefined for the given parameters."""


@dataclass
class AconParams:
    """Per-channel ``(p1, p2, beta)`` of ACON-C."""

    p1: np.ndarray
    p2: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.p1 = np.atleast_1d(np.asarray(self.p1))
        self.p2 = np.atleast_1d(np.asarray(self.p2))
        self.beta = np.atleast_1d(np.asarray(self.beta))
        if not (self.p1.shape == self.p2.shape == self.beta.shape) or self.p1.ndim != 1:
            raise ShapeError(
                f"p1, p2, beta must be 1-D with equal extent, got {self.p1.shape}, {self.p2.shape}, {self.beta.shape}"
            )
        for name in ("p1", "p2", "beta"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"AconParams.{name} contains non-finite values")

    @classmethod
    def initial(cls, channels: int, dtype=np.float64) -> "AconParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype), np.ones(channels, dtype))

    @property
    def channels(self) -> int:
        return self.p1.shape[0]


def channel_view(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Reshape a per-channel vector so it broadcasts against ``x`` along axis 1."""
    v = np.asarray(v)
    if x.ndim < 2:
        raise ShapeError(f"expected a batched (N, C, ...) tensor, got shape {x.shape}")
    if v.ndim != 1 or v.shape[0] != x.shape[1]:
        raise ShapeError(f"per-channel parameter of shape {v.shape} does not match {x.shape[1]} channels")
    return v.reshape((1, -1) + (1,) * (x.ndim - 2))


def reduce_to_channels(g: np.ndarray) -> np.ndarray:
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes)


def acon_a(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    b = channel_view(beta, x)
    return x * sigmoid(b * x)


def acon_b(x: np.ndarray, p: np.ndarray, beta: np.ndarray) -> np.ndarray:
    pv, b = channel_view(p, x), channel_view(beta, x)
    dx = (1 - pv) * x
    return dx * sigmoid(b * dx) + pv * x


def acon_c(x: np.ndarray, params: AconParams) -> np.ndarray:
    p1, p2, b = (channel_view(v, x) for v in (params.p1, params.p2, params.beta))
    return acon_c_broadcast(x, p1, p2, b)


def acon_c_broadcast(x, p1, p2, beta):
    """ACON-C with parameters already broadcastable against ``x``."""
    dx = (p1 - p2) * x
    return dx * sigmoid(beta * dx) + p2 * x


def acon_c_dx(x, p1, p2, beta):
    """First derivative of ACON-C in ``x``: ``d s + beta d^2 x s(1-s) + p2``."""
    d = p1 - p2
    y = beta * d * x
    return d * sigmoid(y) + d * y * sigmoid_slope(y) + p2


def acon_c_dxx(x, p1, p2, beta):
    """Second derivative of ACON-C in ``x``.

    Written as ``beta d^2 s(1-s) (2 + y (1 - 2s))`` with ``y = beta d x``;
    ``s(1-s)`` underflows to zero far out, which is the true limit.
    """
    d = p1 - p2
    y = beta * d * x
    return beta * d * d * sigmoid_slope(y) * (2 + y * (sigmoid(-y) - sigmoid(y)))


def acon_c_param_partials(x, p1, p2, beta):
    """``(df/dp1, df/dp2, df/dbeta)`` elementwise, parameters pre-broadcast."""
    d = p1 - p2
    y = beta * d * x
    s = sigmoid(y)
    ss = sigmoid_slope(y)
    t = y * x * ss
    return x * s + t, x * sigmoid(-y) - t, d * d * x * x * ss


def acon_c_backward(x: np.ndarray, params: AconParams, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_p1, grad_p2, grad_beta)``; parameter grads are per channel."""
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out {grad_out.shape} does not match input {x.shape}")
    p1, p2, b = (channel_view(v, x) for v in (params.p1, params.p2, params.beta))
    gx = grad_out * acon_c_dx(x, p1, p2, b)
    dp1, dp2, db = acon_c_param_partials(x, p1, p2, b)
    return (
        gx,
        reduce_to_channels(grad_out * dp1),
        reduce_to_channels(grad_out * dp2),
        reduce_to_channels(grad_out * db),
    )


def acon_b_backward(x, p, beta, grad_out):
    """Returns ``(grad_x, grad_p, grad_beta)``."""
    one = np.ones_like(np.asarray(p))
    gx, _, gp, gb = acon_c_backward(x, AconParams(one, p, beta), grad_out)
    return gx, gp, gb


def acon_a_backward(x, beta, grad_out):
    """Returns ``(grad_x, grad_beta)``."""
    b = np.asarray(beta)
    gx, _, _, gb = acon_c_backward(x, AconParams(np.ones_like(b), np.zeros_like(b), b), grad_out)
    return gx, gb


def _solve_inflection() -> float:
    """Positive root of ``(y - 2) e^y = y + 2`` by Newton's method from y = 2.5."""
    y = 2.5
    for _ in range(100):
        ey = np.exp(y)
        step = ((y - 2) * ey - (y + 2)) / ((y - 1) * ey - 1)
        y -= step
        if abs(step) < 1e-15:
            break
    return float(y)


INFLECTION_Y = _solve_inflection()


@dataclass(frozen=True)
class DerivativeBounds:
    upper: float
    lower: float
    x_at_upper: float
    x_at_lower: float
    root_y: float


def derivative_bounds(p1: float, p2: float, beta: float) -> DerivativeBounds:
    """Extremes of ACON-C's first derivative.

    They sit where ``beta (p1 - p2) x = +/- root_y`` and evaluate to about
    ``1.0998 p1 - 0.0998 p2`` and ``1.0998 p2 - 0.0998 p1``; ``beta`` only
    moves their location.  ``upper`` is the value at ``y = +root_y``, which is
    the maximum when ``p1 > p2``.
    """
    if not beta > 0:
        raise DomainError(f"derivative bounds need beta > 0, got {beta}")
    if p1 == p2:
        raise DomainError("derivative bounds are undefined for p1 == p2 (ACON-C is linear)")
    scale = (p1 - p2) * beta
    xu = INFLECTION_Y / scale
    xl = -INFLECTION_Y / scale
    return DerivativeBounds(
        upper=float(acon_c_dx(xu, p1, p2, beta)),
        lower=float(acon_c_dx(xl, p1, p2, beta)),
        x_at_upper=float(xu),
        x_at_lower=float(xl),
        root_y=INFLECTION_Y,
    )


def frelu_branches(x, dw_weight, downsample):
    stride = 2 if downsample else 1
    eta_a = T.max_pool2(x, kernel=3, stride=2, pad=1) if downsample else x
    eta_b = T.depthwise_conv(x, dw_weight, stride=stride, pad=dw_weight.shape[1] // 2)
    if eta_a.shape != eta_b.shape:
        raise AssertionError(f"ACON-FReLU branch shapes differ: {eta_a.shape} vs {eta_b.shape}")
    return eta_a, eta_b


def frelu(x: np.ndarray, dw_weight: np.ndarray, downsample: bool = False) -> np.ndarray:
    """Hard-max funnel activation ``max(eta_a, eta_b)``; the large-beta limit of ACON-FReLU."""
    eta_a, eta_b = frelu_branches(x, dw_weight, downsample)
    return np.maximum(eta_a, eta_b)


def acon_frelu(x: np.ndarray, dw_weight: np.ndarray, beta: np.ndarray, downsample: bool = False) -> np.ndarray:
    """Smooth maximum of a spatial branch and a depthwise 3x3 branch.

    Plain form: ``eta_a = x``, ``eta_b = dwconv(x)``.  Downsampling form:
    ``eta_a = maxpool(x)`` (3x3, stride 2, pad 1), ``eta_b = dwconv(x, stride 2)``.
    """
    if dw_weight.ndim != 3 or dw_weight.shape[1] != 3 or dw_weight.shape[2] != 3:
        raise T.ConfigError(f"ACON-FReLU uses a (C, 3, 3) depthwise kernel, got {dw_weight.shape}")
    eta_a, eta_b = frelu_branches(x, dw_weight, downsample)
    return smooth_max2(eta_a, eta_b, channel_view(beta, eta_a))


def acon_frelu_backward(x, dw_weight, beta, grad_out, downsample: bool = False):
    """Returns ``(grad_x, grad_dw_weight, grad_beta)``."""
    eta_a, eta_b = frelu_branches(x, dw_weight, downsample)
    ga, gb, gbeta = smooth_max2_grad(eta_a, eta_b, channel_view(beta, eta_a))
    stride = 2 if downsample else 1
    g_eta_b = grad_out * gb
    gx_b, gw = T.depthwise_conv_backward(x, dw_weight, g_eta_b, stride=stride, pad=1)
    if downsample:
        gx_a = T.max_pool2_backward(x, grad_out * ga, kernel=3, stride=2, pad=1)
    else:
        gx_a = grad_out * ga
    return gx_a + gx_b, gw, reduce_to_channels(grad_out * gbeta)
