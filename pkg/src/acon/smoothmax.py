"""Smooth maximum: the softmax-weighted mean of its arguments.

``beta -> inf`` recovers ``max``, ``beta = 0`` the arithmetic mean and
negative ``beta`` a smooth minimum.  The two-argument form is written through
the logistic function, which is how every ACON activation is evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import real_dtype, sigmoid, sigmoid_slope


@dataclass(frozen=True)
class SmoothMaxConfig:
    beta: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.beta):
            raise ValueError(f"beta must be finite, got {self.beta}")


def smooth_max_n(values: Sequence[float], beta: float) -> float:
    """``sum(x_i e^{beta x_i}) / sum(e^{beta x_i})`` with the max-shift applied."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("smooth_max_n needs at least one value")
    z = beta * x
    w = np.exp(z - z.max())
    return float(np.dot(w, x) / w.sum())


def smooth_max2(a, b, beta):
    """Two-argument smooth maximum ``(a - b) * sigmoid(beta (a - b)) + b``.

    The arguments are ordered first so the result is bitwise symmetric in
    ``a`` and ``b``.  Accepts scalars or broadcastable arrays.
    """
    dt = real_dtype(a, b, beta)
    a = np.asarray(a, dtype=dt)
    b = np.asarray(b, dtype=dt)
    hi = np.maximum(a, b)
    lo = np.minimum(a, b)
    d = hi - lo
    out = d * sigmoid(beta * d) + lo
    return out[()] if out.ndim == 0 else out


def smooth_max2_grad(a, b, beta):
    """Partials of :func:`smooth_max2` with respect to ``(a, b, beta)``.

    With ``d = a - b`` and ``s = sigmoid(beta d)``::

        d/da    = s + beta d s(1-s)
        d/db    = 1 - s - beta d s(1-s)
        d/dbeta = d^2 s(1-s)
    """
    d = np.asarray(a) - np.asarray(b)
    y = beta * d
    s = sigmoid(y)
    ss = sigmoid_slope(y)
    ga = s + y * ss
    gb = sigmoid(-y) - y * ss
    gbeta = d * d * ss
    return ga, gb, gbeta
