"""Deterministic mini-batch SGD with momentum and selective weight decay."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..tensor import ConfigError
from .data import Dataset
from .network import Network

SCHEDULES = ("linear-decay", "cosine", "constant")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, lr: float, loss: float):
        super().__init__(f"loss became {loss} at step {step} (lr={lr!r})")
        self.step, self.lr, self.loss = step, lr, loss


@dataclass
class TrainConfig:
    lr: float = 0.1
    schedule: str = "cosine"
    weight_decay: float = 1e-4
    batch: int = 64
    steps: int = 1000
    seed: int = 0
    momentum: float = 0.9
    activation: str = "acon-c"

    def __post_init__(self):
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be a finite non-negative number, got {self.lr}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight_decay must be >= 0 and momentum in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Rate used for ``step`` (0-based); decays towards zero at ``cfg.steps``."""
    if cfg.schedule == "constant" or cfg.steps == 0:
        return cfg.lr
    frac = step / cfg.steps
    if cfg.schedule == "linear-decay":
        return cfg.lr * (1.0 - frac)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return loss, (grad / n).astype(logits.dtype)


@dataclass
class SGD:
    """Heavy-ball momentum; decay is added to the gradient of masked parameters."""

    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def step(self, net: Network, lr: float) -> None:
        grads = net.named_grads()
        decay = net.decay_mask()
        for name, p in net.named_parameters().items():
            g = grads[name]
            if decay[name] and self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            net.set_parameter(name, p - lr * v)


@dataclass
class StepMetrics:
    step: int
    lr: float
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    steps: list
    epoch_accuracy: list  # (epoch, accuracy) after each completed pass over the data
    final_accuracy: float


def accuracy(net: Network, data: Dataset, batch: int = 1024) -> float:
    hits = 0
    for i in range(0, len(data), batch):
        logits = net.forward(data.x[i:i + batch].astype(net.dtype))
        hits += int((logits.argmax(axis=1) == data.y[i:i + batch]).sum())
    return hits / len(data)


def batch_order(n: int, batch: int, steps: int, seed: int):
    """Yield ``(epoch, indices)`` for every step from seeded per-epoch shuffles."""
    rng = np.random.default_rng(seed)
    epoch, perm, pos = 0, rng.permutation(n), 0
    for _ in range(steps):
        if pos >= n:
            epoch, perm, pos = epoch + 1, rng.permutation(n), 0
        yield epoch, perm[pos:pos + batch]
        pos += batch


def train(net: Network, data: Dataset, cfg: TrainConfig, on_step=None) -> TrainResult:
    """Run ``cfg.steps`` SGD steps; ``on_step(StepMetrics)`` is called after each one."""
    if data.feature_shape != net.input_shape:
        raise ConfigError(f"dataset features {data.feature_shape} do not match network input {net.input_shape}")
    if net.output_shape != (data.num_classes,):
        raise ConfigError(f"network emits {net.output_shape}, dataset has {data.num_classes} classes")
    opt = SGD(cfg.momentum, cfg.weight_decay)
    with np.errstate(over="ignore", invalid="ignore"):
        return _run(net, data, cfg, opt, on_step)


def _run(net, data, cfg, opt, on_step) -> TrainResult:
    history, epochs = [], []
    current_epoch = 0
    for step, (epoch, idx) in enumerate(batch_order(len(data), cfg.batch, cfg.steps, cfg.seed)):
        if epoch != current_epoch:
            epochs.append((current_epoch, accuracy(net, data)))
            current_epoch = epoch
        lr = learning_rate(cfg, step)
        x, y = data.x[idx].astype(net.dtype), data.y[idx]
        net.zero_grad()
        logits = net.forward(x)
        loss, g = softmax_cross_entropy(logits, y)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, lr, loss)
        net.backward(g)
        opt.step(net, lr)
        if not all(np.all(np.isfinite(v)) for v in net.named_parameters().values()):
            raise TrainingDiverged(step, lr, loss)
        m = StepMetrics(step, lr, loss, float((logits.argmax(axis=1) == y).mean()))
        history.append(m)
        if on_step is not None:
            on_step(m)
    final = accuracy(net, data)
    if cfg.steps:
        epochs.append((current_epoch, final))
    return TrainResult(history, epochs, final)
