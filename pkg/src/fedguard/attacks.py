"""Poisoning behaviors: weight manipulation, feature manipulation, label
flipping, and per-round adversary scheduling."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from fedguard.fingerprint import Dataset, Label

ATTACK_KINDS = ("weight_manipulation", "feature_manipulation", "label_flip", "combined")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "weight_manipulation"
    lb: int = 0
    ub: int | None = None  # None means "to the end of the buffer"
    seed: int = 0
    malicious_fraction: float = 0.0
    flip_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind: {self.kind!r}")
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise ValueError("malicious_fraction must lie in [0, 1]")
        if not 0.0 <= self.flip_fraction <= 1.0:
            raise ValueError("flip_fraction must lie in [0, 1]")

    def bounds(self, length: int) -> tuple[int, int]:
        ub = length if self.ub is None else self.ub
        _check_bounds(self.lb, ub, length)
        return self.lb, ub


def _check_bounds(lb: int, ub: int, length: int) -> None:
    if not 0 <= lb < ub <= length:
        raise ValueError(f"invalid bounds [{lb}, {ub}) for buffer of length {length}")


def manipulate_weights(weights: np.ndarray, lb: int, ub: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Scale each weight in [lb, ub) by an independent draw u * (ub - lb),
    u ~ U[-1, 1]; indices outside the slice are untouched."""
    _check_bounds(lb, ub, len(weights))
    out = weights.copy()
    multipliers = rng.uniform(-1.0, 1.0, size=ub - lb) * (ub - lb)
    out[lb:ub] = out[lb:ub] * multipliers
    return out


def manipulate_features(bits: np.ndarray, lb: int, ub: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Randomize the fingerprint slice [lb, ub) to independent Bernoulli(0.5)
    bits; the complement is untouched."""
    _check_bounds(lb, ub, len(bits))
    out = bits.copy()
    out[lb:ub] = (rng.random(ub - lb) < 0.5).astype(np.float64)
    return out


def flip_label_array(labels: np.ndarray, flip_fraction: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Swap benign <-> malware on a random floor(fraction * n) subset of the
    labeled entries; unlabeled entries are untouched."""
    if not 0.0 <= flip_fraction <= 1.0:
        raise ValueError("flip_fraction must lie in [0, 1]")
    labeled_idx = np.flatnonzero(labels != Label.UNLABELED)
    n_flip = int(flip_fraction * len(labeled_idx))
    chosen = rng.permutation(labeled_idx)[:n_flip] if n_flip else np.empty(0, dtype=int)
    out = labels.copy()
    out[chosen] = 1 - out[chosen]
    return out


def _tampered_copy(dataset: Dataset, *, bits: np.ndarray | None = None,
                   labels: np.ndarray | None = None) -> Dataset:
    # Adversarial output may violate honest-data invariants (e.g. a flipped
    # system app), so bypass Dataset validation on purpose.
    out = copy.copy(dataset)
    out.bits = dataset.bits if bits is None else bits
    out.labels = dataset.labels if labels is None else labels
    return out


def flip_labels(dataset: Dataset, flip_fraction: float,
                rng: np.random.Generator) -> Dataset:
    """Dataset-level label flipping; everything but the labels is shared."""
    return _tampered_copy(
        dataset, labels=flip_label_array(dataset.labels, flip_fraction, rng)
    )


class Adversary:
    """Schedules which clients are malicious each round and applies tampering.

    The malicious set is re-drawn every round: each client is malicious
    independently with probability ``malicious_fraction``.  All draws derive
    from (seed, round, client) so results do not depend on call order.
    """

    def __init__(self, cfg: AttackConfig, client_ids: list[str]):
        self.cfg = cfg
        self.client_ids = list(client_ids)

    def _rng(self, *stream) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed & 0xFFFFFFFF, *stream])

    def malicious_clients(self, round_index: int) -> set[str]:
        if self.cfg.malicious_fraction == 0.0:
            return set()
        rng = self._rng(0xA0, round_index)
        draws = rng.random(len(self.client_ids))
        return {
            cid
            for cid, draw in zip(self.client_ids, draws)
            if draw < self.cfg.malicious_fraction
        }

    def tampers_data(self) -> bool:
        return self.cfg.kind in ("feature_manipulation", "label_flip", "combined")

    def tampers_weights(self) -> bool:
        return self.cfg.kind == "weight_manipulation"

    def tamper_dataset(self, dataset: Dataset, client_id: str,
                       round_index: int) -> Dataset:
        """Feature manipulation and/or label flipping on a local training set.

        The combined kind applies feature manipulation first, then flips
        labels.
        """
        cid = self.client_ids.index(client_id)
        if self.cfg.kind in ("feature_manipulation", "combined"):
            rng = self._rng(0xF0, round_index, cid)
            lb, ub = self.cfg.bounds(dataset.registry.total_features)
            bits = dataset.bits.copy()
            bits[:, lb:ub] = (rng.random((bits.shape[0], ub - lb)) < 0.5).astype(
                np.float64
            )
            dataset = _tampered_copy(dataset, bits=bits)
        if self.cfg.kind in ("label_flip", "combined"):
            rng = self._rng(0x1F, round_index, cid)
            dataset = flip_labels(dataset, self.cfg.flip_fraction, rng)
        return dataset

    def tamper_weights(self, weights: np.ndarray, client_id: str, model_name: str,
                       round_index: int) -> np.ndarray:
        if not self.tampers_weights():
            return weights
        cid = self.client_ids.index(client_id)
        rng = self._rng(0xE7, round_index, cid, _name_stream(model_name))
        lb, ub = self.cfg.bounds(len(weights))
        return manipulate_weights(weights, lb, ub, rng)


def _name_stream(name: str) -> int:
    return sum(name.encode("utf-8")) & 0xFFFF


class NullAdversary(Adversary):
    """All-honest schedule."""

    def __init__(self, client_ids: list[str] | None = None):
        super().__init__(AttackConfig(malicious_fraction=0.0), client_ids or [])

    def malicious_clients(self, round_index: int) -> set[str]:
        return set()


def apply_adversary(adversary: Adversary, client_id: str, round_index: int,
                    weights: np.ndarray, model_name: str = "") -> np.ndarray:
    """Tamper an outgoing head-weight vector if the client is malicious this
    round; honest clients pass through bitwise untouched."""
    if client_id not in adversary.malicious_clients(round_index):
        return weights
    return adversary.tamper_weights(weights, client_id, model_name, round_index)
