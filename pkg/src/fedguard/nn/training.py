"""Training loop: binary cross-entropy loss, SGD steps, checkpointed epochs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from fedguard.nn.metrics import (
    Metrics,
    bce_per_sample,
    compute_metrics,
    confusion_counts,
    metrics_from_counts,
    predict_labels,
)
from fedguard.nn.network import Network

log = logging.getLogger(__name__)


@dataclass
class Splits:
    """Train/validation(/test) arrays; targets are one-hot [benign, malware]."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray | None = None
    y_test: np.ndarray | None = None


@dataclass
class TrainingConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    checkpoint_metric: str = "validation_accuracy"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")
        if self.checkpoint_metric != "validation_accuracy":
            raise ValueError(f"unsupported checkpoint metric: {self.checkpoint_metric}")


@dataclass
class EpochStats:
    epoch: int
    train: Metrics
    val: Metrics


@dataclass
class TrainResult:
    best_net: Network
    best_epoch: int
    history: list[EpochStats] = field(default_factory=list)


def bce_loss(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean over the batch of per-sample BCE (summed over the 2 outputs)."""
    return float(np.mean(bce_per_sample(probs, targets)))


def bce_loss_grad(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d(mean BCE)/d(probs)."""
    p = np.clip(probs, 1e-12, 1.0 - 1e-12)
    return (p - targets) / (p * (1.0 - p)) / probs.shape[0]


def loss_and_grads(net: Network, x: np.ndarray, y: np.ndarray):
    """Forward + backward; returns (loss, grads aligned with param_arrays())."""
    probs = net.forward_training(np.asarray(x, dtype=np.float64))
    loss = bce_loss(probs, y)
    net.backward(bce_loss_grad(probs, y))
    return loss, [g.copy() for g in net.grad_arrays()]


def apply_gradients(net: Network, grads: list[np.ndarray], learning_rate: float) -> None:
    """One SGD step on trainable layers: w <- w - lr * g."""
    if learning_rate == 0.0:
        return
    pos = 0
    for layer in net.layers:
        n = len(layer.params)
        if n and layer.trainable:
            for arr, g in zip(layer.params, grads[pos : pos + n]):
                arr -= learning_rate * g
        pos += n


def backward_and_step(net: Network, x: np.ndarray, y: np.ndarray, learning_rate: float) -> float:
    """SGD step over one batch; returns the pre-step loss.

    A non-finite gradient is reported and the step skipped, leaving the
    weights untouched.
    """
    if len(x) == 0:
        raise ValueError("empty batch")
    if learning_rate < 0:
        raise ValueError("learning_rate must be non-negative")
    loss, grads = loss_and_grads(net, x, y)
    if not all(np.isfinite(g).all() for g in grads):
        log.warning("non-finite gradient in %s; step skipped", net.name)
        return loss
    apply_gradients(net, grads, learning_rate)
    return loss


def train(net: Network, splits: Splits, config: TrainingConfig) -> TrainResult:
    """Train with per-epoch validation checkpointing.

    Returns the weights snapshot with the highest validation accuracy seen at
    any epoch end (earliest epoch wins ties) plus the per-epoch history.
    Deterministic under ``config.seed``: the shuffle order is fixed.
    """
    if len(splits.x_train) == 0 or len(splits.x_val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    rng = np.random.default_rng(config.seed)
    n = len(splits.x_train)
    history: list[EpochStats] = []
    best_acc = -1.0
    best_net = None
    best_epoch = -1
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        seen = 0
        tp = fp = fn = tn = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = splits.x_train[idx], splits.y_train[idx]
            probs = net.forward_training(xb)
            loss_sum += float(np.sum(bce_per_sample(probs, yb)))
            seen += len(idx)
            dtp, dfp, dfn, dtn = confusion_counts(
                predict_labels(probs), yb[:, 1].astype(np.int64)
            )
            tp, fp, fn, tn = tp + dtp, fp + dfp, fn + dfn, tn + dtn
            grad = bce_loss_grad(probs, yb)
            net.backward(grad)
            grads = net.grad_arrays()
            if all(np.isfinite(g).all() for g in grads):
                apply_gradients(net, grads, config.learning_rate)
            else:
                log.warning("non-finite gradient in %s; step skipped", net.name)
        train_metrics = metrics_from_counts(tp, fp, fn, tn, loss_sum / seen)
        val_metrics = _evaluate_lenient(net, splits.x_val, splits.y_val)
        history.append(EpochStats(epoch, train_metrics, val_metrics))
        if val_metrics.accuracy > best_acc:
            best_acc = val_metrics.accuracy
            best_epoch = epoch
            best_net = net.clone()
            # snap to the f32 grid so a saved checkpoint reloads bit-exactly
            best_net.snap_to_f32()
    return TrainResult(best_net, best_epoch, history)


def _evaluate_lenient(net: Network, x: np.ndarray, y: np.ndarray) -> Metrics:
    probs = x.astype(np.float64)
    for layer in net.layers:
        probs = layer.forward(probs, cache=False)
    return compute_metrics(probs, y)


@dataclass
class SweepEntry:
    learning_rate: float
    best_val_accuracy: float
    final_train_loss: float
    diverged: bool


@dataclass
class SweepResult:
    entries: list[SweepEntry]
    best_learning_rate: float


def lr_sweep(net_builder, splits: Splits, grid, epochs: int = 3, batch_size: int = 32,
             seed: int = 0) -> SweepResult:
    """Short training run per learning rate; never raises on divergence.

    ``net_builder`` must return a freshly initialized network each call so
    every rate starts from identical weights.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("learning-rate grid is empty")
    entries = []
    for lr in grid:
        net = net_builder()
        result = train(
            net,
            splits,
            TrainingConfig(learning_rate=lr, batch_size=batch_size, epochs=epochs, seed=seed),
        )
        losses = [h.train.loss for h in result.history]
        diverged = (not np.isfinite(losses[-1])) or losses[-1] >= losses[0]
        best_val = max(h.val.accuracy for h in result.history)
        entries.append(SweepEntry(lr, best_val, float(losses[-1]), bool(diverged)))
    best = max(entries, key=lambda e: (e.best_val_accuracy, -e.learning_rate))
    return SweepResult(entries, best.learning_rate)
