"""Sequential networks, FLOPs/parameter counting and beta histograms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from ..meta import UsageError
from ..tensor import Shape4, ShapeError
from .layers import Acon, AconFReLU, Layer, MetaAcon, Residual, layer_from_config


class Network:
    """An ordered list of layers with a checked shape chain.

    ``input_shape`` is per sample, e.g. ``(3, 32, 32)`` or ``(2,)``.
    Parameters are registered as ``"<index>.<name>"`` (nested residual
    bodies as ``"<index>.<j>.<name>"``).
    """

    def __init__(self, layers: Sequence[Layer], input_shape: tuple, dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(tuple(layer.out_shape(self.shapes[-1])))
        names = [n for n, _, _, _ in self._walk()]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names")

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1]

    def _walk(self) -> Iterator[tuple]:
        def rec(prefix, layers):
            for i, layer in enumerate(layers):
                if isinstance(layer, Residual):
                    yield from rec(f"{prefix}{i}.", layer.body)
                else:
                    for pname in layer.params:
                        yield f"{prefix}{i}.{pname}", layer, pname, layer.no_decay

        yield from rec("", self.layers)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {name: layer.params[p] for name, layer, p, _ in self._walk()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {name: layer.grads.get(p, np.zeros_like(layer.params[p])) for name, layer, p, _ in self._walk()}

    def decay_mask(self) -> dict[str, bool]:
        return {name: p not in nd for name, _, p, nd in self._walk()}

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        for n, layer, p, _ in self._walk():
            if n == name:
                if value.shape != layer.params[p].shape:
                    raise ShapeError(f"{name}: shape {value.shape} != {layer.params[p].shape}")
                layer.params[p] = np.asarray(value, dtype=layer.params[p].dtype)
                return
        raise KeyError(name)

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, x: np.ndarray, upto: int | None = None) -> np.ndarray:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"network expects (N, {self.input_shape}), got {x.shape}")
        layers = self.layers if upto is None else self.layers[:upto]
        for layer in layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = grad_out
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def config(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "dtype": self.dtype.name,
            "layers": [layer.config() for layer in self.layers],
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "Network":
        dtype = np.dtype(cfg.get("dtype", "float32"))
        layers = [layer_from_config(c, dtype) for c in cfg["layers"]]
        return cls(layers, tuple(cfg["input_shape"]), dtype)

    def astype(self, dtype) -> "Network":
        for _, layer, p, _ in self._walk():
            layer.params[p] = layer.params[p].astype(dtype)
        self.dtype = np.dtype(dtype)
        return self


def count_flops_params(net: Network, input_shape=None) -> tuple[int, int]:
    """Multiply-accumulates (one MAC = one FLOP) and total parameter elements.

    ``input_shape`` may be a :class:`Shape4`, a full ``(N, ...)`` tuple, or
    ``None`` for one sample of the network's declared input.
    """
    if input_shape is None:
        batch, shape = 1, net.input_shape
    elif isinstance(input_shape, Shape4):
        batch, shape = input_shape.n, input_shape.as_tuple()[1:]
    else:
        batch, shape = int(input_shape[0]), tuple(input_shape[1:])
    if tuple(shape) != net.input_shape:
        probe = Network.from_config({**net.config(), "input_shape": list(shape)})
        return count_flops_params(probe, (batch,) + tuple(shape))
    flops = 0
    for layer, s in zip(net.layers, net.shapes):
        flops += layer.flops(s, batch)
    params = sum(int(v.size) for v in net.named_parameters().values())
    return flops, params


@dataclass
class BetaHistogram:
    edges: np.ndarray  # (bins + 1,)
    counts: np.ndarray  # (samples, bins)
    shared: bool  # True when beta does not depend on the input

    def rows(self):
        for sid, row in enumerate(self.counts):
            for b, c in enumerate(row):
                yield sid, float(self.edges[b]), float(self.edges[b + 1]), int(c)


def layer_beta(net: Network, samples: np.ndarray, layer_index: int) -> tuple[np.ndarray, bool]:
    """Per-sample beta values of an ACON-type layer, shape (N, K)."""
    if not 0 <= layer_index < len(net.layers):
        raise UsageError(f"layer index {layer_index} out of range (network has {len(net.layers)} layers)")
    layer = net.layers[layer_index]
    if not isinstance(layer, (Acon, AconFReLU, MetaAcon)):
        raise UsageError(f"layer {layer_index} is {layer.kind!r}, not an ACON activation")
    x = net.forward(samples, upto=layer_index)
    return layer.current_beta(x), not isinstance(layer, MetaAcon)


def collect_beta_histogram(net: Network, samples: np.ndarray, layer_index: int, bins: int = 20) -> BetaHistogram:
    """Bin each sample's beta values with fixed-width bins.

    meta-ACON betas are sigmoid outputs so the bins span [0, 1]; plain ACON
    betas are learned per channel and the span is taken from their range.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    beta, shared = layer_beta(net, samples, layer_index)
    if shared:
        lo, hi = float(beta.min()), float(beta.max())
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
    else:
        lo, hi = 0.0, 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = np.stack([np.histogram(row, bins=edges)[0] for row in beta]).astype(np.int64)
    return BetaHistogram(edges, counts, shared)
