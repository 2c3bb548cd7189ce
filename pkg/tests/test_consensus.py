import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedguard.consensus import (
    ClassProbabilities,
    PseudoLossSchedule,
    classify,
    combined_backward_and_step,
    combined_loss,
    consensus_from_probabilities,
    majority_vote,
    pseudo_label,
)
from fedguard.fingerprint import Label, build_registry
from fedguard.nn import Activation, Dense, Network
from fedguard.zoo import ModelSpec

from oracles import brute_majority


class TestClassify:
    def test_benign_wins_clear_case(self):
        assert classify(ClassProbabilities(0.7, 0.3)) == Label.BENIGN

    def test_tie_goes_benign(self):
        assert classify(ClassProbabilities(0.5, 0.5)) == Label.BENIGN

    def test_malware_wins_clear_case(self):
        assert classify(ClassProbabilities(0.02, 0.98)) == Label.MALWARE

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            ClassProbabilities(float("nan"), 0.5)

    @given(
        st.floats(0.0, 1.0),
        st.floats(0.0, 1.0),
        st.floats(0.01, 0.99),
        st.floats(0.001, 5.0),
    )
    def test_invariant_under_strictly_increasing_transform(self, pb, pm, shift, scale):
        # argmax is preserved by x -> (x*scale + shift) clipped back to [0,1]
        def transform(p):
            return min(1.0, (p * scale + shift) / (scale + shift))

        base = classify(ClassProbabilities(pb, pm))
        mapped = classify(ClassProbabilities(transform(pb), transform(pm)))
        assert base == mapped


class TestMajorityVote:
    def test_simple_majority(self):
        label, count = majority_vote([Label.BENIGN, Label.BENIGN, Label.MALWARE])
        assert (label, count) == (Label.BENIGN, 2)

    def test_even_split_breaks_to_malware(self):
        label, count = majority_vote(
            [Label.BENIGN, Label.MALWARE, Label.BENIGN, Label.MALWARE]
        )
        assert (label, count) == (Label.MALWARE, 2)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            majority_vote([])

    @pytest.mark.parametrize("n", range(1, 12))
    def test_matches_brute_force_when_strict_majority(self, n):
        for bits in itertools.product([Label.BENIGN, Label.MALWARE], repeat=n):
            expected, expected_count = brute_majority(list(bits))
            label, count = majority_vote(list(bits))
            if expected is not None:
                assert (label, count) == (expected, expected_count)
            else:
                assert label == Label.MALWARE
                assert count == sum(1 for b in bits if b == Label.MALWARE)


def stub_models(vote_pattern, registry):
    """Seven fixed-output models keyed Static/HM1..HM6.

    Each 'network' is a dense(1->2)+sigmoid stub whose bias produces the
    requested probabilities; the registry has one 1-wide template so every
    projection is a single bit.
    """
    models = {}
    rng = np.random.default_rng(0)
    for name, (pb, pm) in vote_pattern.items():
        net = Network(name, [Dense(1, 2, rng), Activation("sigmoid")], 0)
        net.layers[0].w[...] = 0.0
        net.layers[0].b[...] = [_logit(pb), _logit(pm)]
        spec = ModelSpec(name, "MLP", ("all",), "desk")
        models[name] = (spec, net)
    return models


def _logit(p):
    p = min(max(p, 1e-9), 1 - 1e-9)
    return float(np.log(p / (1 - p)))


class TestPseudoLabel:
    def setup_method(self):
        self.registry = build_registry([("all", 1)])
        self.fp = np.array([1.0])

    def test_helpers_override_wrong_primary_vote(self):
        # primary says malware with full confidence, all six helpers say benign
        pattern = {
            "Static": (0.0, 1.0),
            "HM1": (1.0, 0.0),
            "HM2": (0.99, 0.01),
            "HM3": (1.0, 0.0),
            "HM4": (0.99, 0.01),
            "HM5": (1.0, 0.0),
            "HM6": (0.99, 0.01),
        }
        result = pseudo_label(self.fp, stub_models(pattern, self.registry), self.registry)
        assert result.label == Label.BENIGN
        assert result.votes_for == 6
        assert result.total_voters == 7

    def test_majority_confirms_malware(self):
        # two helpers disagree but five models vote malware
        pattern = {
            "Static": (0.0, 1.0),
            "HM1": (0.9, 0.1),
            "HM2": (0.99, 0.01),
            "HM3": (0.0, 1.0),
            "HM4": (0.0, 1.0),
            "HM5": (0.0, 1.0),
            "HM6": (0.02, 0.98),
        }
        result = pseudo_label(self.fp, stub_models(pattern, self.registry), self.registry)
        assert result.label == Label.MALWARE
        assert result.votes_for == 5

    def test_unanimous(self):
        pattern = {name: (0.9, 0.1) for name in ("Static", "HM1", "HM2", "HM3", "HM4", "HM5", "HM6")}
        result = pseudo_label(self.fp, stub_models(pattern, self.registry), self.registry)
        assert result.label == Label.BENIGN
        assert result.votes_for == 7

    def test_new_consensus_needs_majority_support(self):
        # over all 7-voter patterns: the winning label always holds > N/2 votes,
        # and flipping a unanimous consensus takes at least ceil(N/2) changes.
        for bits in itertools.product([0, 1], repeat=7):
            votes = [Label(b) for b in bits]
            label, count = majority_vote(votes)
            assert count * 2 > 7
            assert label == (Label.MALWARE if sum(bits) >= 4 else Label.BENIGN)


class TestSchedule:
    def test_zero_before_ramp(self):
        s = PseudoLossSchedule(max_weight=3.0, ramp_start=5, ramp_end=25)
        assert s.weight_at(0) == 0.0
        assert s.weight_at(4) == 0.0

    def test_max_after_ramp(self):
        s = PseudoLossSchedule(max_weight=3.0, ramp_start=5, ramp_end=25)
        assert s.weight_at(25) == 3.0
        assert s.weight_at(100) == 3.0

    def test_linear_between(self):
        s = PseudoLossSchedule(max_weight=3.0, ramp_start=5, ramp_end=25)
        assert abs(s.weight_at(15) - 1.5) < 1e-12

    def test_monotone_nondecreasing(self):
        s = PseudoLossSchedule(max_weight=2.0, ramp_start=3, ramp_end=9)
        values = [s.weight_at(e) for e in range(30)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_degenerate_ramp_is_constant(self):
        s = PseudoLossSchedule(max_weight=1.0, ramp_start=0, ramp_end=0)
        assert s.weight_at(0) == 1.0


def _stub_net_with_probs(p_rows):
    """A 1-input network emitting fixed probabilities per output unit.

    Only usable with a single-sample batch per row; built per call.
    """
    rng = np.random.default_rng(0)
    net = Network("stub", [Dense(1, 2, rng), Activation("sigmoid")], 0)
    net.layers[0].w[...] = 0.0
    net.layers[0].b[...] = [_logit(p_rows[0]), _logit(p_rows[1])]
    return net


class TestCombinedLoss:
    def test_zero_weight_equals_labeled_loss(self):
        # per-sample BCE 0.2 and 0.4 on the labeled side
        schedule = PseudoLossSchedule(max_weight=1.0, ramp_start=10, ramp_end=10)
        net = _per_sample_net()
        labeled = _batch_with_bce([0.2, 0.4])
        pseudo = _batch_with_bce([0.6])
        loss = combined_loss(net, labeled, pseudo, epoch=0, schedule=schedule)
        assert abs(loss - 0.3) < 1e-9

    def test_empty_labeled_uses_pseudo_only(self):
        schedule = PseudoLossSchedule(max_weight=1.0, ramp_start=0, ramp_end=0)
        net = _per_sample_net()
        labeled = (np.zeros((0, 2)), np.zeros((0, 2)))
        pseudo = _batch_with_bce([0.6])
        loss = combined_loss(net, labeled, pseudo, epoch=5, schedule=schedule)
        assert abs(loss - 0.6) < 1e-9

    def test_scalar_arithmetic_oracle(self):
        # 0.3 labeled mean + 0.5 * 0.6 pseudo mean = 0.6
        schedule = PseudoLossSchedule(max_weight=0.5, ramp_start=0, ramp_end=0)
        net = _per_sample_net()
        labeled = _batch_with_bce([0.2, 0.4])
        pseudo = _batch_with_bce([0.6])
        loss = combined_loss(net, labeled, pseudo, epoch=3, schedule=schedule)
        assert abs(loss - 0.6) < 1e-9

    def test_both_empty_rejected(self):
        schedule = PseudoLossSchedule()
        net = _per_sample_net()
        empty = (np.zeros((0, 2)), np.zeros((0, 2)))
        with pytest.raises(ValueError):
            combined_loss(net, empty, empty, 0, schedule)

    def test_gradients_flow_through_both_terms(self):
        rng = np.random.default_rng(40)
        net = Network(
            "t",
            [Dense(3, 4, rng), Activation("tanh"), Dense(4, 2, rng), Activation("sigmoid")],
            0,
        )
        schedule = PseudoLossSchedule(max_weight=2.0, ramp_start=0, ramp_end=0)
        x_l, y_l = rng.random((4, 3)), np.eye(2)[rng.integers(0, 2, 4)]
        x_p, y_p = rng.random((3, 3)), np.eye(2)[rng.integers(0, 2, 3)]
        before = [a.copy() for a in net.param_arrays()]
        first = combined_backward_and_step(net, (x_l, y_l), (x_p, y_p), 0, schedule, 0.5)
        moved = any(not np.array_equal(a, b) for a, b in zip(net.param_arrays(), before))
        assert moved
        for _ in range(60):
            combined_backward_and_step(net, (x_l, y_l), (x_p, y_p), 0, schedule, 0.5)
        last = combined_loss(net, (x_l, y_l), (x_p, y_p), 0, schedule)
        assert last < first


def _per_sample_net():
    """Identity-ish network: input IS the probability pair.

    Implemented as dense with identity weights on a pre-sigmoid scale; the
    test batches feed logits so the sigmoid output reproduces the wanted
    probabilities exactly (to float precision).
    """
    rng = np.random.default_rng(1)
    net = Network("probe", [Dense(2, 2, rng), Activation("sigmoid")], 0)
    net.layers[0].w[...] = np.eye(2)
    net.layers[0].b[...] = 0.0
    return net


def _batch_with_bce(per_sample_losses):
    """Inputs/targets whose per-sample summed BCE equals the given values.

    Target [1, 0]; both output units share the loss equally: p_correct =
    exp(-L/2), p_wrong = 1 - exp(-L/2).
    """
    xs, ys = [], []
    for loss in per_sample_losses:
        p_good = float(np.exp(-loss / 2))
        p_bad = 1.0 - p_good
        xs.append([_logit(p_good), _logit(p_bad)])
        ys.append([1.0, 0.0])
    return np.array(xs), np.array(ys)
