"""Differentiable layers with hand-written backward passes.

Per-sample shapes exclude the batch axis: ``(C, H, W)`` for feature maps,
``(D,)`` for flat features.  ``forward`` caches what ``backward`` needs;
``backward`` accumulates into ``grads`` and returns the input gradient.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .. import family as F
from .. import tensor as T
from ..meta import RoutingSpec, RoutingState, meta_acon_backward, meta_acon_forward
from ..meta import UsageError

ACTIVATIONS = (
    "relu",
    "acon-a",
    "acon-b",
    "acon-c",
    "meta-acon-layer",
    "meta-acon-channel",
    "meta-acon-pixel",
)


def _conv_extent(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


class Layer:
    kind = "layer"
    # Parameter names excluded from weight decay.
    no_decay: frozenset = frozenset()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def flops(self, in_shape: tuple, batch: int = 1) -> int:
        return 0

    def config(self) -> dict:
        return {"kind": self.kind}

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _accumulate(self, name: str, g: np.ndarray) -> None:
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g

    def _need_cache(self):
        if self._cache is None:
            raise UsageError(f"{self.kind}.backward called before forward")
        return self._cache


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Dense(Layer):
    kind = "dense"
    no_decay = frozenset({"bias"})

    def __init__(self, d_in: int, d_out: int, bias: bool = True, rng=None, dtype=np.float32):
        super().__init__()
        self.d_in, self.d_out, self.use_bias = d_in, d_out, bias
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = _he(rng, (d_out, d_in), d_in, dtype)
        if bias:
            self.params["bias"] = np.zeros(d_out, dtype)

    def out_shape(self, in_shape):
        if in_shape != (self.d_in,):
            raise T.ShapeError(f"dense expects ({self.d_in},), got {in_shape}")
        return (self.d_out,)

    def forward(self, x):
        self._cache = x
        return T.dense(x, self.params["weight"], self.params.get("bias"))

    def backward(self, g):
        x = self._need_cache()
        gx, gw, gb = T.dense_backward(x, self.params["weight"], g)
        self._accumulate("weight", gw)
        if self.use_bias:
            self._accumulate("bias", gb)
        return gx

    def flops(self, in_shape, batch=1):
        return batch * self.d_in * self.d_out

    def config(self):
        return {"kind": self.kind, "d_in": self.d_in, "d_out": self.d_out, "bias": self.use_bias}


class PointwiseConv(Layer):
    kind = "pointwise_conv"
    no_decay = frozenset({"bias"})

    def __init__(self, c_in: int, c_out: int, bias: bool = False, rng=None, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out, self.use_bias = c_in, c_out, bias
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = _he(rng, (c_out, c_in), c_in, dtype)
        if bias:
            self.params["bias"] = np.zeros(c_out, dtype)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise T.ShapeError(f"pointwise_conv expects ({self.c_in}, H, W), got {in_shape}")
        return (self.c_out,) + tuple(in_shape[1:])

    def forward(self, x):
        self._cache = x
        return T.pointwise_conv(x, self.params["weight"], self.params.get("bias"))

    def backward(self, g):
        x = self._need_cache()
        gx, gw, gb = T.pointwise_conv_backward(x, self.params["weight"], g)
        self._accumulate("weight", gw)
        if self.use_bias:
            self._accumulate("bias", gb)
        return gx

    def flops(self, in_shape, batch=1):
        _, h, w = in_shape
        return batch * self.c_out * self.c_in * h * w

    def config(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out, "bias": self.use_bias}


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, rng=None, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = _he(rng, (c_out, c_in, k, k), c_in * k * k, dtype)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise T.ShapeError(f"conv2d expects ({self.c_in}, H, W), got {in_shape}")
        p = self.k // 2
        return (self.c_out, _conv_extent(in_shape[1], self.k, self.stride, p), _conv_extent(in_shape[2], self.k, self.stride, p))

    def forward(self, x):
        self._cache = x
        return T.conv2d(x, self.params["weight"], self.stride)

    def backward(self, g):
        x = self._need_cache()
        gx, gw = T.conv2d_backward(x, self.params["weight"], g, self.stride)
        self._accumulate("weight", gw)
        return gx

    def flops(self, in_shape, batch=1):
        _, ho, wo = self.out_shape(in_shape)
        return batch * self.c_out * self.c_in * self.k * self.k * ho * wo

    def config(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out, "k": self.k, "stride": self.stride}


class DepthwiseConv(Layer):
    kind = "depthwise_conv"

    def __init__(self, channels: int, k: int = 3, stride: int = 1, rng=None, dtype=np.float32):
        super().__init__()
        self.channels, self.k, self.stride = channels, k, stride
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = _he(rng, (channels, k, k), k * k, dtype)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.channels:
            raise T.ShapeError(f"depthwise_conv expects ({self.channels}, H, W), got {in_shape}")
        p = self.k // 2
        return (self.channels, _conv_extent(in_shape[1], self.k, self.stride, p), _conv_extent(in_shape[2], self.k, self.stride, p))

    def forward(self, x):
        self._cache = x
        return T.depthwise_conv(x, self.params["weight"], self.stride)

    def backward(self, g):
        x = self._need_cache()
        gx, gw = T.depthwise_conv_backward(x, self.params["weight"], g, self.stride)
        self._accumulate("weight", gw)
        return gx

    def flops(self, in_shape, batch=1):
        _, ho, wo = self.out_shape(in_shape)
        return batch * self.channels * self.k * self.k * ho * wo

    def config(self):
        return {"kind": self.kind, "channels": self.channels, "k": self.k, "stride": self.stride}


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, kernel: int = 2, stride: int = 2, pad: int = 0):
        super().__init__()
        self.kernel, self.stride, self.pad = kernel, stride, pad

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, _conv_extent(h, self.kernel, self.stride, self.pad), _conv_extent(w, self.kernel, self.stride, self.pad))

    def forward(self, x):
        self._cache = x
        return T.max_pool2(x, self.kernel, self.stride, self.pad)

    def backward(self, g):
        return T.max_pool2_backward(self._need_cache(), g, self.kernel, self.stride, self.pad)

    def config(self):
        return {"kind": self.kind, "kernel": self.kernel, "stride": self.stride, "pad": self.pad}


class GlobalAvgPool(Layer):
    kind = "gap"

    def out_shape(self, in_shape):
        return (in_shape[0], 1, 1)

    def forward(self, x):
        self._cache = x.shape
        return T.global_avg_pool(x)

    def backward(self, g):
        return T.global_avg_pool_backward(g, self._need_cache())


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._need_cache())


class ChannelAffine(Layer):
    """Per-channel ``scale * x + shift``; a lightweight stand-in for normalization."""

    kind = "affine"
    no_decay = frozenset({"scale", "shift"})

    def __init__(self, channels: int, dtype=np.float32, **_):
        super().__init__()
        self.channels = channels
        self.params["scale"] = np.ones(channels, dtype)
        self.params["shift"] = np.zeros(channels, dtype)

    def forward(self, x):
        self._cache = x
        return x * F.channel_view(self.params["scale"], x) + F.channel_view(self.params["shift"], x)

    def backward(self, g):
        x = self._need_cache()
        self._accumulate("scale", F.reduce_to_channels(g * x))
        self._accumulate("shift", F.reduce_to_channels(g))
        return g * F.channel_view(self.params["scale"], x)

    def flops(self, in_shape, batch=1):
        return batch * int(np.prod(in_shape))

    def config(self):
        return {"kind": self.kind, "channels": self.channels}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype)

    def backward(self, g):
        return np.where(self._need_cache(), g, 0).astype(g.dtype)


class Acon(Layer):
    """ACON-A, -B or -C with per-channel parameters."""

    kind = "acon"
    no_decay = frozenset({"p", "p1", "p2", "beta"})

    def __init__(self, variant: str, channels: int, dtype=np.float32, **_):
        super().__init__()
        if variant not in F.ACON_KINDS:
            raise ValueError(f"ACON variant must be one of {F.ACON_KINDS}, got {variant!r}")
        self.variant, self.channels = variant, channels
        init = F.AconParams.initial(channels, dtype)
        if variant == "C":
            self.params.update(p1=init.p1, p2=init.p2)
        elif variant == "B":
            self.params["p"] = np.full(channels, 0.25, dtype)
        self.params["beta"] = init.beta

    def acon_params(self) -> F.AconParams:
        b = self.params["beta"]
        if self.variant == "C":
            return F.AconParams(self.params["p1"], self.params["p2"], b)
        if self.variant == "B":
            return F.AconParams(np.ones_like(b), self.params["p"], b)
        return F.AconParams(np.ones_like(b), np.zeros_like(b), b)

    def forward(self, x):
        self._cache = x
        if self.variant == "A":
            return F.acon_a(x, self.params["beta"])
        if self.variant == "B":
            return F.acon_b(x, self.params["p"], self.params["beta"])
        return F.acon_c(x, self.acon_params())

    def backward(self, g):
        x = self._need_cache()
        gx, gp1, gp2, gb = F.acon_c_backward(x, self.acon_params(), g)
        self._accumulate("beta", gb)
        if self.variant == "C":
            self._accumulate("p1", gp1)
            self._accumulate("p2", gp2)
        elif self.variant == "B":
            self._accumulate("p", gp2)
        return gx

    def current_beta(self, x: np.ndarray) -> np.ndarray:
        """Shared per-channel beta, repeated for each sample: (N, C)."""
        return np.broadcast_to(self.params["beta"], (x.shape[0], self.channels)).copy()

    def config(self):
        return {"kind": self.kind, "variant": self.variant, "channels": self.channels}


class MetaAcon(Layer):
    kind = "meta_acon"
    no_decay = frozenset({"p1", "p2", "w1", "w2"})

    def __init__(self, level: str, channels: int, reduction_r: int = 16, raw_sum: bool = False,
                 rng=None, dtype=np.float32):
        super().__init__()
        self.rspec = RoutingSpec(level, channels, reduction_r, raw_sum)
        self.params["p1"] = np.ones(channels, dtype)
        self.params["p2"] = np.zeros(channels, dtype)
        if level == "channel":
            st = RoutingState.initial(self.rspec, rng or np.random.default_rng(0), dtype)
            self.params["w1"], self.params["w2"] = st.w1, st.w2
        self.last_beta: Optional[np.ndarray] = None

    @property
    def channels(self):
        return self.rspec.channels

    def _state(self):
        if self.rspec.level == "channel":
            return RoutingState(self.params["w1"], self.params["w2"])
        return RoutingState()

    def forward(self, x):
        out = meta_acon_forward(x, self.params["p1"], self.params["p2"], self.rspec, self._state())
        self._cache = out.cache
        self.last_beta = out.beta
        return out.y

    def backward(self, g):
        grads = meta_acon_backward(self._need_cache(), g)
        for k, v in grads.items():
            if k != "x":
                self._accumulate(k, v)
        return grads["x"]

    def current_beta(self, x: np.ndarray) -> np.ndarray:
        beta = meta_acon_forward(x, self.params["p1"], self.params["p2"], self.rspec, self._state()).beta
        return beta.reshape(beta.shape[0], -1)

    def config(self):
        s = self.rspec
        return {"kind": self.kind, "level": s.level, "channels": s.channels,
                "reduction_r": s.reduction_r, "raw_sum": s.raw_sum}


class AconFReLU(Layer):
    kind = "acon_frelu"
    no_decay = frozenset({"beta"})

    def __init__(self, channels: int, downsample: bool = False, rng=None, dtype=np.float32):
        super().__init__()
        self.channels, self.downsample = channels, downsample
        rng = rng or np.random.default_rng(0)
        self.params["dw_weight"] = _he(rng, (channels, 3, 3), 9, dtype)
        self.params["beta"] = np.ones(channels, dtype)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.channels:
            raise T.ShapeError(f"acon_frelu expects ({self.channels}, H, W), got {in_shape}")
        if not self.downsample:
            return in_shape
        c, h, w = in_shape
        return (c, _conv_extent(h, 3, 2, 1), _conv_extent(w, 3, 2, 1))

    def forward(self, x):
        self._cache = x
        return F.acon_frelu(x, self.params["dw_weight"], self.params["beta"], self.downsample)

    def backward(self, g):
        x = self._need_cache()
        gx, gw, gb = F.acon_frelu_backward(x, self.params["dw_weight"], self.params["beta"], g, self.downsample)
        self._accumulate("dw_weight", gw)
        self._accumulate("beta", gb)
        return gx

    def flops(self, in_shape, batch=1):
        _, ho, wo = self.out_shape(in_shape)
        return batch * self.channels * 9 * ho * wo

    def current_beta(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.params["beta"], (x.shape[0], self.channels)).copy()

    def config(self):
        return {"kind": self.kind, "channels": self.channels, "downsample": self.downsample}


class Residual(Layer):
    """``x + body(x)``; the body must preserve shape."""

    kind = "residual"

    def __init__(self, body: list):
        super().__init__()
        self.body = list(body)

    def out_shape(self, in_shape):
        s = in_shape
        for layer in self.body:
            s = layer.out_shape(s)
        if s != in_shape:
            raise T.ShapeError(f"residual body maps {in_shape} to {s}")
        return in_shape

    def forward(self, x):
        y = x
        for layer in self.body:
            y = layer.forward(y)
        self._cache = True
        return x + y

    def backward(self, g):
        self._need_cache()
        gb = g
        for layer in reversed(self.body):
            gb = layer.backward(gb)
        return g + gb

    def flops(self, in_shape, batch=1):
        total, s = 0, in_shape
        for layer in self.body:
            total += layer.flops(s, batch)
            s = layer.out_shape(s)
        return total

    def zero_grad(self):
        for layer in self.body:
            layer.zero_grad()

    def config(self):
        return {"kind": self.kind, "body": [layer.config() for layer in self.body]}


def make_activation(name: str, channels: int, rng=None, dtype=np.float32, reduction_r: int = 16) -> Layer:
    """Build an activation layer from its CLI name (see ``ACTIVATIONS``)."""
    if name == "relu":
        return ReLU()
    if name.startswith("acon-") and len(name) == 6:
        return Acon(name[-1].upper(), channels, dtype=dtype)
    if name.startswith("meta-acon-"):
        return MetaAcon(name[len("meta-acon-"):], channels, reduction_r=reduction_r, rng=rng, dtype=dtype)
    raise ValueError(f"unknown activation {name!r}; choose from {ACTIVATIONS}")


_SIMPLE = {
    "dense": Dense,
    "pointwise_conv": PointwiseConv,
    "conv2d": Conv2d,
    "depthwise_conv": DepthwiseConv,
    "maxpool": MaxPool,
    "gap": GlobalAvgPool,
    "flatten": Flatten,
    "affine": ChannelAffine,
    "relu": ReLU,
    "acon": Acon,
    "meta_acon": MetaAcon,
    "acon_frelu": AconFReLU,
}


def layer_from_config(cfg: dict, dtype=np.float32) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == "residual":
        return Residual([layer_from_config(c, dtype) for c in cfg["body"]])
    cls = _SIMPLE.get(kind)
    if cls is None:
        raise ValueError(f"unknown layer kind {kind!r}")
    if kind in ("maxpool", "gap", "flatten", "relu"):
        return cls(**cfg)
    return cls(**cfg, dtype=dtype)
