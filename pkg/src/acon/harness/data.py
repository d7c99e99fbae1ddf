"""Desk-scale datasets: synthetic generators and a CSV loader."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..tensor import ConfigError


class DatasetError(ValueError):
    """Raised when a dataset cannot be found or parsed."""


@dataclass
class Dataset:
    x: np.ndarray  # (N, *feature_shape)
    y: np.ndarray  # (N,) integer labels
    num_classes: int

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise DatasetError(f"{self.x.shape[0]} samples but {self.y.shape[0]} labels")
        if self.x.shape[0] == 0:
            raise DatasetError("dataset is empty")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.x.shape[0]

    @property
    def feature_shape(self) -> tuple:
        return tuple(self.x.shape[1:])


def spiral(n_per_class: int = 200, classes: int = 2, noise: float = 0.15, turns: float = 2.0,
           seed: int = 0, dtype=np.float64) -> Dataset:
    """Interleaved Archimedean spiral arms in the plane, one arm per class."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for k in range(classes):
        r = np.linspace(0.05, 1.0, n_per_class)
        theta = 2 * np.pi * turns * r + 2 * np.pi * k / classes + rng.normal(0, noise, n_per_class)
        xs.append(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1))
        ys.append(np.full(n_per_class, k))
    return Dataset(np.concatenate(xs).astype(dtype), np.concatenate(ys).astype(np.int64), classes)


def blobs(n_per_class: int = 100, classes: int = 3, dim: int = 2, spread: float = 0.5,
          seed: int = 0, dtype=np.float64) -> Dataset:
    """Isotropic Gaussian clusters with centres on a ring of radius 2."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    centres = np.zeros((classes, dim))
    centres[:, 0], centres[:, 1 % dim] = 2 * np.cos(angles), 2 * np.sin(angles)
    x = np.concatenate([c + spread * rng.standard_normal((n_per_class, dim)) for c in centres])
    y = np.repeat(np.arange(classes), n_per_class)
    return Dataset(x.astype(dtype), y.astype(np.int64), classes)


def bars(n_per_class: int = 64, size: int = 8, noise: float = 0.3, seed: int = 0, dtype=np.float64) -> Dataset:
    """Single-channel images holding a horizontal (label 0) or vertical (label 1) bar."""
    rng = np.random.default_rng(seed)
    x = noise * rng.standard_normal((2 * n_per_class, 1, size, size))
    pos = rng.integers(0, size, 2 * n_per_class)
    for i in range(2 * n_per_class):
        if i < n_per_class:
            x[i, 0, pos[i], :] += 1.0
        else:
            x[i, 0, :, pos[i]] += 1.0
    y = np.repeat([0, 1], n_per_class)
    return Dataset(x.astype(dtype), y.astype(np.int64), 2)


def _read_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        table = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    if table.shape[1] < 2:
        raise DatasetError(f"{path}: need a label column and at least one feature")
    labels = table[:, 0]
    if not np.all(labels == np.round(labels)):
        raise DatasetError(f"{path}: labels must be integers")
    return table[:, 1:], labels.astype(np.int64)


def load_csv(path: str, feature_shape: tuple | None = None, num_classes: int | None = None,
             dtype=np.float64) -> Dataset:
    """Load ``label,f0,f1,...`` rows from a file or every ``*.csv`` in a directory.

    Features are row-major ``C x H x W`` when ``feature_shape`` is given and
    flat otherwise.  Lines starting with ``#`` are ignored.
    """
    if os.path.isdir(path):
        files = sorted(os.path.join(path, f) for f in os.listdir(path) if f.endswith(".csv"))
        if not files:
            raise DatasetError(f"no .csv files in {path}")
    elif os.path.isfile(path):
        files = [path]
    else:
        raise DatasetError(f"dataset {path!r} does not exist")
    parts = [_read_csv(f) for f in files]
    widths = {p[0].shape[1] for p in parts}
    if len(widths) != 1:
        raise DatasetError(f"files in {path} have differing feature counts {sorted(widths)}")
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    if feature_shape is not None:
        feature_shape = tuple(int(s) for s in feature_shape)
        if int(np.prod(feature_shape)) != x.shape[1]:
            raise DatasetError(f"{x.shape[1]} features do not fill shape {feature_shape}")
        x = x.reshape((-1,) + feature_shape)
    k = int(y.max()) + 1 if num_classes is None else num_classes
    return Dataset(x.astype(dtype), y, k)


BUILTIN = ("spiral", "blobs", "bars")


def get_dataset(name: str, seed: int = 0, feature_shape=None, dtype=np.float64) -> Dataset:
    """Resolve a built-in generator name or a CSV path."""
    if name == "spiral":
        return spiral(seed=seed, dtype=dtype)
    if name == "blobs":
        return blobs(seed=seed, dtype=dtype)
    if name == "bars":
        return bars(seed=seed, dtype=dtype)
    if not name:
        raise ConfigError("no dataset given")
    return load_csv(name, feature_shape, dtype=dtype)
