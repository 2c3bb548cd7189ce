"""Label consensus: per-model classification, majority voting, pseudo-labels,
and the weighted semi-supervised loss."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from fedguard.fingerprint import Label, TemplateRegistry
from fedguard.nn import Network, apply_gradients, bce_loss, bce_loss_grad


@dataclass(frozen=True)
class ClassProbabilities:
    p_benign: float
    p_malware: float
    model_name: str = ""

    def __post_init__(self):
        for value in (self.p_benign, self.p_malware):
            if not math.isfinite(value):
                raise ValueError("non-finite class probability")
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"probability {value} outside [0, 1]")


@dataclass(frozen=True)
class ConsensusResult:
    label: Label
    votes_for: int
    total_voters: int
    per_model: tuple[ClassProbabilities, ...]


def classify(probs: ClassProbabilities) -> Label:
    """Benign wins ties: benign iff p_benign >= p_malware."""
    return Label.BENIGN if probs.p_benign >= probs.p_malware else Label.MALWARE


def majority_vote(labels) -> tuple[Label, int]:
    """Boyer-Moore candidate selection plus a verification pass.

    Returns the strict-majority label with its exact count.  When no strict
    majority exists (an even split), returns malware with its count - the
    conservative failure mode for a detector.
    """
    labels = list(labels)
    if not labels:
        raise ValueError("empty label list")
    candidate = None
    tally = 0
    for label in labels:
        if tally == 0:
            candidate = label
            tally = 1
        elif label == candidate:
            tally += 1
        else:
            tally -= 1
    count = sum(1 for l in labels if l == candidate)
    if count * 2 > len(labels):
        return Label(candidate), count
    malware_count = sum(1 for l in labels if l == Label.MALWARE)
    return Label.MALWARE, malware_count


def consensus_from_probabilities(per_model) -> ConsensusResult:
    """Reduce per-model probabilities to votes and take the majority."""
    per_model = tuple(per_model)
    votes = [classify(p) for p in per_model]
    label, count = majority_vote(votes)
    return ConsensusResult(label, count, len(per_model), per_model)


def model_probabilities(
    fp_bits: np.ndarray,
    models: dict[str, tuple],
    registry: TemplateRegistry,
) -> list[ClassProbabilities]:
    out = []
    for name, (spec, net) in models.items():
        idx = registry.projection_indices(spec.feature_templates)
        probs = net.forward(fp_bits[None, idx])
        out.append(ClassProbabilities(float(probs[0, 0]), float(probs[0, 1]), name))
    return out


def pseudo_label(fp_bits: np.ndarray, models: dict[str, tuple],
                 registry: TemplateRegistry) -> ConsensusResult:
    """Consensus label for one fingerprint from all models' independent votes."""
    return consensus_from_probabilities(model_probabilities(fp_bits, models, registry))


def pseudo_label_batch(bits: np.ndarray, models: dict[str, tuple],
                       registry: TemplateRegistry):
    """Vectorized consensus over many fingerprints.

    Returns (consensus labels, per-model label matrix ordered like
    ``models``) - the audit-log and evaluation path.
    """
    names = list(models.keys())
    votes = np.empty((len(names), bits.shape[0]), dtype=np.int64)
    for row, name in enumerate(names):
        spec, net = models[name]
        idx = registry.projection_indices(spec.feature_templates)
        probs = net.forward(bits[:, idx])
        votes[row] = (probs[:, 0] < probs[:, 1]).astype(np.int64)
    consensus = np.empty(bits.shape[0], dtype=np.int64)
    for j in range(bits.shape[0]):
        label, _ = majority_vote([Label(v) for v in votes[:, j]])
        consensus[j] = label
    return consensus, votes, names


def write_audit_log(path, app_ids, names, votes, probs_by_model, consensus,
                    vote_counts) -> None:
    """CSV audit log: one row per app with per-model labels and probabilities."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["app_id"]
        for name in names:
            header += [f"{name}_label", f"{name}_p_benign", f"{name}_p_malware"]
        header += ["consensus", "votes_for"]
        writer.writerow(header)
        for j, app_id in enumerate(app_ids):
            row = [app_id]
            for i, name in enumerate(names):
                row += [
                    Label(votes[i, j]).name.lower(),
                    probs_by_model[i][j, 0],
                    probs_by_model[i][j, 1],
                ]
            row += [Label(consensus[j]).name.lower(), vote_counts[j]]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Weighted semi-supervised loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PseudoLossSchedule:
    """Weight on the pseudo-labeled loss term as a function of epoch.

    Zero before ``ramp_start``, ``max_weight`` from ``ramp_end`` on, linear
    in between.
    """

    max_weight: float = 3.0
    ramp_start: int = 5
    ramp_end: int = 25

    def __post_init__(self):
        if self.max_weight < 0:
            raise ValueError("max_weight must be non-negative")
        if self.ramp_end < self.ramp_start:
            raise ValueError("ramp_end must be >= ramp_start")

    def weight_at(self, epoch: int) -> float:
        if epoch < self.ramp_start:
            return 0.0
        if epoch >= self.ramp_end:
            return self.max_weight
        span = self.ramp_end - self.ramp_start
        return self.max_weight * (epoch - self.ramp_start) / span


def combined_loss(net: Network, labeled, pseudo, epoch: int,
                  schedule: PseudoLossSchedule) -> float:
    """Labeled mean BCE plus schedule weight times pseudo-labeled mean BCE."""
    (x_l, y_l), (x_p, y_p) = labeled, pseudo
    if len(x_l) == 0 and len(x_p) == 0:
        raise ValueError("both batches are empty")
    weight = schedule.weight_at(epoch)
    total = 0.0
    if len(x_l):
        total += bce_loss(net.forward(x_l), y_l)
    if len(x_p):
        total += weight * bce_loss(net.forward(x_p), y_p)
    return total


def combined_backward_and_step(net: Network, labeled, pseudo, epoch: int,
                               schedule: PseudoLossSchedule,
                               learning_rate: float) -> float:
    """One SGD step on the combined loss; gradients flow through both terms.

    Returns the pre-step combined loss.  Non-finite gradients skip the step.
    """
    (x_l, y_l), (x_p, y_p) = labeled, pseudo
    if len(x_l) == 0 and len(x_p) == 0:
        raise ValueError("both batches are empty")
    weight = schedule.weight_at(epoch)
    total = 0.0
    grads = None
    if len(x_l):
        probs = net.forward_training(np.asarray(x_l, dtype=np.float64))
        total += bce_loss(probs, y_l)
        net.backward(bce_loss_grad(probs, y_l))
        grads = [g.copy() for g in net.grad_arrays()]
    if len(x_p) and weight != 0.0:
        probs = net.forward_training(np.asarray(x_p, dtype=np.float64))
        total += weight * bce_loss(probs, y_p)
        net.backward(weight * bce_loss_grad(probs, y_p))
        pseudo_grads = net.grad_arrays()
        if grads is None:
            grads = [g.copy() for g in pseudo_grads]
        else:
            grads = [a + b for a, b in zip(grads, pseudo_grads)]
    elif len(x_p):
        total += weight * bce_loss(net.forward(x_p), y_p)
    if grads is not None and all(np.isfinite(g).all() for g in grads):
        apply_gradients(net, grads, learning_rate)
    return total


def pseudo_targets(consensus_labels: np.ndarray) -> np.ndarray:
    y = np.zeros((consensus_labels.shape[0], 2))
    y[np.arange(consensus_labels.shape[0]), consensus_labels] = 1.0
    return y
