import hashlib

import numpy as np
import pytest
from scipy import stats

from fedguard.attacks import (
    Adversary,
    AttackConfig,
    NullAdversary,
    apply_adversary,
    flip_label_array,
    flip_labels,
    manipulate_features,
    manipulate_weights,
)
from fedguard.fingerprint import Label, default_registry, synth_generate


def _hash(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


class TestWeightManipulation:
    def test_formula_on_single_index(self):
        w = np.array([5.0, 2.0, 7.0])
        lb, ub = 1, 2
        u = np.random.default_rng(3).uniform(-1.0, 1.0, size=1)[0]
        out = manipulate_weights(w, lb, ub, np.random.default_rng(3))
        assert out[1] == 2.0 * u * (ub - lb)
        assert out[0] == 5.0 and out[2] == 7.0

    def test_full_range_multiplier_bounded(self):
        rng = np.random.default_rng(4)
        w = np.ones(50)
        out = manipulate_weights(w, 0, 50, rng)
        assert np.all(np.abs(out) <= 50.0)

    def test_multiplier_symmetric_about_zero(self):
        rng = np.random.default_rng(5)
        n = 100_000
        w = np.ones(n)
        out = manipulate_weights(w, 0, n, rng)
        multipliers = out  # w was all ones
        assert abs(multipliers.mean()) < 0.02 * n

    def test_complement_untouched_bitwise(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=200)
        lb, ub = 40, 120
        out = manipulate_weights(w, lb, ub, rng)
        assert _hash(out[:lb]) == _hash(w[:lb])
        assert _hash(out[ub:]) == _hash(w[ub:])

    def test_deterministic_under_seed(self):
        w = np.arange(10.0)
        a = manipulate_weights(w, 2, 8, np.random.default_rng(7))
        b = manipulate_weights(w, 2, 8, np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            manipulate_weights(np.ones(5), 3, 3, np.random.default_rng(0))
        with pytest.raises(ValueError):
            manipulate_weights(np.ones(5), -1, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            manipulate_weights(np.ones(5), 0, 6, np.random.default_rng(0))


class TestFeatureManipulation:
    def test_slice_density_half(self):
        rng = np.random.default_rng(8)
        n = 100_000
        bits = np.zeros(n)
        out = manipulate_features(bits, 0, n, rng)
        assert abs(out.mean() - 0.5) < 0.01

    def test_bernoulli_half_chi_square(self):
        rng = np.random.default_rng(9)
        n = 100_000
        out = manipulate_features(np.zeros(n), 0, n, rng)
        ones = int(out.sum())
        _, p = stats.chisquare([ones, n - ones])
        assert p > 0.01

    def test_empty_slice_rejected(self):
        with pytest.raises(ValueError):
            manipulate_features(np.zeros(10), 4, 4, np.random.default_rng(0))

    def test_complement_untouched(self):
        rng = np.random.default_rng(10)
        bits = (rng.random(300) < 0.3).astype(float)
        out = manipulate_features(bits, 100, 200, rng)
        assert _hash(out[:100]) == _hash(bits[:100])
        assert _hash(out[200:]) == _hash(bits[200:])
        assert set(np.unique(out)) <= {0.0, 1.0}


class TestLabelFlip:
    def test_zero_fraction_identity(self):
        labels = np.array([0, 1, 0, 1, 2], dtype=np.uint8)
        out = flip_label_array(labels, 0.0, np.random.default_rng(0))
        assert np.array_equal(out, labels)

    def test_full_flip_on_all_benign(self):
        labels = np.zeros(10, dtype=np.uint8)
        out = flip_label_array(labels, 1.0, np.random.default_rng(1))
        assert (out == Label.MALWARE).all()

    def test_involution_under_fixed_seed(self):
        labels = np.array([0, 1, 0, 1, 1, 0, 2, 2], dtype=np.uint8)
        once = flip_label_array(labels, 0.5, np.random.default_rng(2))
        twice = flip_label_array(once, 0.5, np.random.default_rng(2))
        assert np.array_equal(twice, labels)

    def test_unlabeled_untouched(self):
        labels = np.full(20, Label.UNLABELED, dtype=np.uint8)
        out = flip_label_array(labels, 1.0, np.random.default_rng(3))
        assert np.array_equal(out, labels)

    def test_dataset_level_flip(self, registry):
        ds = synth_generate(registry, 10, 10, 5, 0.9, seed=1)
        flipped = flip_labels(ds, 1.0, np.random.default_rng(4))
        labeled = ds.labels != Label.UNLABELED
        assert np.array_equal(flipped.labels[labeled], 1 - ds.labels[labeled])
        assert np.array_equal(flipped.labels[~labeled], ds.labels[~labeled])
        assert np.array_equal(flipped.bits, ds.bits)


class TestAdversary:
    def test_honest_client_passes_through_bitwise(self):
        adv = Adversary(
            AttackConfig(kind="weight_manipulation", malicious_fraction=0.0, seed=1),
            ["a", "b"],
        )
        w = np.random.default_rng(5).normal(size=30)
        out = apply_adversary(adv, "a", 0, w)
        assert out is w

    def test_malicious_schedule_redrawn_per_round(self):
        adv = Adversary(
            AttackConfig(kind="weight_manipulation", malicious_fraction=0.5, seed=2),
            [f"c{i}" for i in range(10)],
        )
        sets = [frozenset(adv.malicious_clients(r)) for r in range(12)]
        assert len(set(sets)) > 1  # varies across rounds
        assert sets[0] == frozenset(adv.malicious_clients(0))  # stable within a round

    def test_malicious_weight_tamper_changes_slice_only(self):
        adv = Adversary(
            AttackConfig(kind="weight_manipulation", lb=5, ub=15, malicious_fraction=1.0, seed=3),
            ["a"],
        )
        w = np.random.default_rng(6).normal(size=30)
        out = apply_adversary(adv, "a", 2, w, "Static")
        assert not np.array_equal(out[5:15], w[5:15])
        assert np.array_equal(out[:5], w[:5])
        assert np.array_equal(out[15:], w[15:])

    def test_combined_tamper_applies_features_then_labels(self, registry):
        ds = synth_generate(registry, 20, 20, 0, 1.0, seed=7)
        adv = Adversary(
            AttackConfig(kind="combined", malicious_fraction=1.0, seed=8, flip_fraction=1.0),
            ["a"],
        )
        out = adv.tamper_dataset(ds, "a", 0)
        assert not np.array_equal(out.bits, ds.bits)  # features randomized
        assert np.array_equal(out.labels, 1 - ds.labels)  # labels flipped
        assert set(np.unique(out.bits)) <= {0.0, 1.0}

    def test_null_adversary(self):
        adv = NullAdversary(["a", "b"])
        assert adv.malicious_clients(0) == set()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AttackConfig(kind="nonsense")
        with pytest.raises(ValueError):
            AttackConfig(malicious_fraction=1.5)
