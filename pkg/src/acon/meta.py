"""meta-ACON: ACON-C whose switching factor is generated from the input.

Three generators are provided:

* layer   ``beta[n]      = sigmoid(sum_c GAP(x)[n, c])``            -> (N, 1, 1, 1)
* channel ``beta[n, c]   = sigmoid(W2 @ W1 @ GAP(x)[n])``            -> (N, C, 1, 1)
* pixel   ``beta[n,c,h,w] = sigmoid(x[n, c, h, w])``                 -> shape of x

Rank-2 (N, C) features are treated as (N, C, 1, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .family import acon_c_broadcast, acon_c_dx, acon_c_param_partials, channel_view, reduce_to_channels
from .tensor import ShapeError, sigmoid

LEVELS = ("layer", "channel", "pixel")


class UsageError(RuntimeError):
    """Raised when an API is called out of order (e.g. backward before forward)."""


@dataclass(frozen=True)
class RoutingSpec:
    level: str
    channels: int
    reduction_r: int = 16
    # Sum over C, H, W instead of the channel sum of spatial means.
    raw_sum: bool = False

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"routing level must be one of {LEVELS}, got {self.level!r}")
        if self.channels < 1 or self.reduction_r < 1:
            raise ValueError("channels and reduction_r must be positive")

    @property
    def hidden(self) -> int:
        return max(self.channels // self.reduction_r, 1)


@dataclass
class RoutingState:
    """Weights of the channel-level generator; empty for the other levels."""

    w1: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    w2: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @classmethod
    def initial(cls, rspec: RoutingSpec, rng: Optional[np.random.Generator] = None, dtype=np.float64) -> "RoutingState":
        if rspec.level != "channel":
            return cls(np.zeros((0, 0), dtype), np.zeros((0, 0), dtype))
        rng = np.random.default_rng(0) if rng is None else rng
        c, hid = rspec.channels, rspec.hidden
        w1 = rng.uniform(-1, 1, size=(hid, c)) / np.sqrt(c)
        w2 = rng.uniform(-1, 1, size=(c, hid)) / np.sqrt(hid)
        return cls(w1.astype(dtype), w2.astype(dtype))

    def check(self, rspec: RoutingSpec) -> None:
        if rspec.level != "channel":
            return
        want1, want2 = (rspec.hidden, rspec.channels), (rspec.channels, rspec.hidden)
        if self.w1.shape != want1 or self.w2.shape != want2:
            raise ShapeError(f"routing weights {self.w1.shape}, {self.w2.shape} do not match {want1}, {want2}")


def _as4(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x[:, :, None, None]
    if x.ndim != 4:
        raise ShapeError(f"meta-ACON expects rank 2 or 4 input, got shape {x.shape}")
    return x


def beta_layerwise(x: np.ndarray, raw_sum: bool = False) -> np.ndarray:
    x = _as4(x)
    g = x.sum(axis=(2, 3)) if raw_sum else x.mean(axis=(2, 3))
    return sigmoid(g.sum(axis=1)).reshape(-1, 1, 1, 1)


def beta_channelwise(x: np.ndarray, state: RoutingState) -> np.ndarray:
    x = _as4(x)
    c = x.shape[1]
    if state.w1.ndim != 2 or state.w1.shape[1] != c or state.w2.shape != (c, state.w1.shape[0]):
        raise ShapeError(f"routing weights {state.w1.shape}, {state.w2.shape} do not fit {c} channels")
    g = x.mean(axis=(2, 3))
    z = (g @ state.w1.T) @ state.w2.T
    return sigmoid(z)[:, :, None, None]


def beta_pixelwise(x: np.ndarray) -> np.ndarray:
    return sigmoid(x)


def generate_beta(x: np.ndarray, rspec: RoutingSpec, state: RoutingState) -> np.ndarray:
    if rspec.level == "layer":
        return beta_layerwise(x, rspec.raw_sum)
    if rspec.level == "channel":
        return beta_channelwise(x, state)
    return _as4(beta_pixelwise(x))


@dataclass
class MetaAconCache:
    x: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    beta: np.ndarray
    rspec: RoutingSpec
    state: RoutingState
    in_shape: tuple


class MetaAconOutput(NamedTuple):
    y: np.ndarray
    beta: np.ndarray
    cache: MetaAconCache


def meta_acon_forward(x, p1, p2, rspec: RoutingSpec, state: RoutingState) -> MetaAconOutput:
    """ACON-C with ``beta = G(x)``.  Returns ``(y, beta, cache)``; ``y`` has the input's shape."""
    in_shape = x.shape
    x4 = _as4(x)
    if x4.shape[1] != rspec.channels:
        raise ShapeError(f"input has {x4.shape[1]} channels, routing config expects {rspec.channels}")
    state.check(rspec)
    p1v, p2v = channel_view(p1, x4), channel_view(p2, x4)
    beta = generate_beta(x4, rspec, state)
    y = acon_c_broadcast(x4, p1v, p2v, beta).reshape(in_shape)
    return MetaAconOutput(y, beta, MetaAconCache(x4, np.asarray(p1), np.asarray(p2), beta, rspec, state, in_shape))


def meta_acon_backward(cache: Optional[MetaAconCache], grad_out: np.ndarray, include_beta_path: bool = True) -> dict:
    """Gradients for ``x``, ``p1``, ``p2`` and, at channel level, ``w1``/``w2``.

    The input gradient has two parts: the direct ACON-C slope and the path
    through the generated ``beta``.  ``include_beta_path=False`` drops the
    second one and exists only to show that gradient checks catch it.
    """
    if cache is None:
        raise UsageError("meta_acon_backward needs the cache returned by meta_acon_forward")
    x, beta, rspec, state = cache.x, cache.beta, cache.rspec, cache.state
    g = grad_out.reshape(x.shape)
    p1v, p2v = channel_view(cache.p1, x), channel_view(cache.p2, x)

    gx = g * acon_c_dx(x, p1v, p2v, beta)
    dp1, dp2, dbeta = acon_c_param_partials(x, p1v, p2v, beta)
    grads = {"p1": reduce_to_channels(g * dp1), "p2": reduce_to_channels(g * dp2)}

    gb_full = g * dbeta
    bslope = beta * (1 - beta)
    n, c, h, w = x.shape
    if rspec.level == "layer":
        dz = gb_full.sum(axis=(1, 2, 3)) * bslope.reshape(-1)
        scale = 1.0 if rspec.raw_sum else 1.0 / (h * w)
        gx_beta = np.broadcast_to((dz * scale)[:, None, None, None], x.shape)
    elif rspec.level == "channel":
        dz = gb_full.sum(axis=(2, 3)) * bslope[:, :, 0, 0]
        gap = x.mean(axis=(2, 3))
        hidden = gap @ state.w1.T
        grads["w2"] = dz.T @ hidden
        dh = dz @ state.w2
        grads["w1"] = dh.T @ gap
        gx_beta = np.broadcast_to(((dh @ state.w1) / (h * w))[:, :, None, None], x.shape)
    else:
        gx_beta = gb_full * bslope

    if include_beta_path:
        gx = gx + gx_beta
    grads["x"] = gx.reshape(cache.in_shape)
    return grads
