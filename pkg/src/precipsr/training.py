"""MSE loss, Adam and the early-stopping training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import AttentionSRModel, forward
from .tensor import Tensor, ShapeError, backward, mean, mul, no_grad, sub

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs_max: int = 1000
    batch_size: int = 64
    patience: int = 60
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_max < 1:
            raise ValueError("epochs_max must be >= 1")
        if not 0 <= self.patience < self.epochs_max:
            raise ValueError("patience must be in [0, epochs_max)")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros(p.shape, np.float64) for p in params], [np.zeros(p.shape, np.float64) for p in params])


@dataclass
class TrainState:
    epoch: int = 0
    best_val: float = math.inf
    best_epoch: int = 0
    since_improvement: int = 0
    adam: AdamState | None = None

    def observe(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; True when it is a new best."""
        self.epoch += 1
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.best_epoch = self.epoch
            self.since_improvement = 0
            return True
        self.since_improvement += 1
        return False

    def should_stop(self, patience: int) -> bool:
        return self.since_improvement >= patience


def mse_loss(pred: Tensor, truth: Tensor) -> Tensor:
    """Mean over batch and grid of squared error."""
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    d = sub(pred, truth)
    return mean(mul(d, d))


def adam_step(params: Sequence[Tensor], state: AdamState, config: TrainConfig) -> None:
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '?'} has no gradient")
        g = p.grad.astype(np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        p.data = (p.data.astype(np.float64) - update).astype(np.float32)


@dataclass
class ArrayDataset:
    """log1p-space network inputs: x [n,h,w,1], y [n,H,W,1], elevation [1,H,W,1] or None."""

    x: np.ndarray
    y: np.ndarray
    elevation: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y differ in length")


def predict(model: AttentionSRModel, x: np.ndarray, elevation: np.ndarray | None, batch_size: int = 64) -> np.ndarray:
    elev = Tensor(elevation) if elevation is not None and model.config.use_topography else None
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(forward(model, Tensor(x[i:i + batch_size]), elev).data)
    return np.concatenate(outs, axis=0)


def evaluate_loss(model: AttentionSRModel, data: ArrayDataset, batch_size: int = 64) -> float:
    """Dataset-mean MSE in log1p space."""
    pred = predict(model, data.x, data.elevation, batch_size).astype(np.float64)
    d = pred - data.y
    return float((d * d).mean())


@dataclass
class TrainResult:
    model: AttentionSRModel
    history: list[tuple[int, float, float]] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)

    @property
    def best_epoch(self) -> int:
        return self.state.best_epoch

    def write_history(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "train_loss", "val_loss"))
            for e, tr, va in self.history:
                w.writerow((e, f"{tr:.9g}", f"{va:.9g}"))


def train(model: AttentionSRModel, train_data: ArrayDataset, val_data: ArrayDataset, config: TrainConfig,
          val_loss_fn: Callable[[AttentionSRModel, ArrayDataset], float] | None = None,
          max_seconds: float | None = None) -> TrainResult:
    """Shuffled mini-batch Adam with early stopping; restores the best-validation parameters.

    ``val_loss_fn`` replaces the validation MSE (used to script stopping
    behaviour). ``max_seconds`` bounds wall time; the epoch in flight finishes.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training and validation splits must be nonempty")
    val_loss_fn = val_loss_fn or (lambda m, d: evaluate_loss(m, d, config.batch_size))
    params = model.parameters()
    state = TrainState(adam=AdamState.for_params(params))
    rng = np.random.default_rng(config.seed)
    elev = Tensor(train_data.elevation) if train_data.elevation is not None and model.config.use_topography else None
    best = model.state_arrays()
    history = []
    t0 = time.monotonic()
    for _ in range(config.epochs_max):
        order = rng.permutation(len(train_data))
        total, count = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = np.sort(order[i:i + config.batch_size])
            model.zero_grad()
            loss = mse_loss(forward(model, Tensor(train_data.x[idx]), elev), Tensor(train_data.y[idx]))
            backward(loss)
            adam_step(params, state.adam, config)
            total += loss.item() * len(idx)
            count += len(idx)
        val = float(val_loss_fn(model, val_data))
        if state.observe(val):
            best = model.state_arrays()
        history.append((state.epoch, total / count, val))
        log.info("epoch %d train %.5f val %.5f", state.epoch, total / count, val)
        if state.should_stop(config.patience):
            break
        if max_seconds is not None and time.monotonic() - t0 > max_seconds:
            break
    model.load_arrays(best)
    model.zero_grad()
    return TrainResult(model, history, state)
