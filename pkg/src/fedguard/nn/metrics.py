"""Classification metrics; malware is the positive class."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Metrics:
    loss: float
    accuracy: float
    precision: float
    recall: float
    f1: float


def bce_per_sample(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Binary cross-entropy per sample, summed over the two sigmoid outputs."""
    p = np.clip(probs, 1e-12, 1.0 - 1e-12)
    return -(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p)).sum(axis=1)


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """0 (benign) where p_benign >= p_malware, else 1 (malware)."""
    return (probs[:, 0] < probs[:, 1]).astype(np.int64)


def confusion_counts(pred: np.ndarray, truth: np.ndarray) -> tuple[int, int, int, int]:
    tp = int(((pred == 1) & (truth == 1)).sum())
    fp = int(((pred == 1) & (truth == 0)).sum())
    fn = int(((pred == 0) & (truth == 1)).sum())
    tn = int(((pred == 0) & (truth == 0)).sum())
    return tp, fp, fn, tn


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int, loss: float) -> Metrics:
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(float(loss), accuracy, precision, recall, f1)


def compute_metrics(probs: np.ndarray, targets: np.ndarray) -> Metrics:
    truth = targets[:, 1].astype(np.int64)
    pred = predict_labels(probs)
    loss = float(np.mean(bce_per_sample(probs, targets)))
    return metrics_from_counts(*confusion_counts(pred, truth), loss)


def evaluate(net, x: np.ndarray, y: np.ndarray) -> Metrics:
    """Run inference and score it; ``y`` is one-hot [benign, malware]."""
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    probs = _forward_lenient(net, x)
    return compute_metrics(probs, y)


def _forward_lenient(net, x: np.ndarray) -> np.ndarray:
    """Forward pass that tolerates non-finite weights (diverged training)."""
    x = np.asarray(x, dtype=np.float64)
    for layer in net.layers:
        x = layer.forward(x, cache=False)
    return x
