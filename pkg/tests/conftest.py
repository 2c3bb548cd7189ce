import numpy as np
import pytest

from fedguard import fingerprint as fp
from fedguard import zoo
from fedguard.federation import FederationServer, GuardTrainingConfig, build_client, train_guards
from fedguard.fingerprint import ClassSignal, Dataset, Label, Provenance, Split
from fedguard.nn import Splits, TrainingConfig, train
from fedguard.transfer import HeadSpec


@pytest.fixture(scope="session")
def registry():
    return fp.default_registry()


def corpus_splits(corpus, feature_idx=None):
    labeled = corpus.subset(corpus.labels != Label.UNLABELED)
    parts = {}
    for which in (Split.TRAIN, Split.VAL, Split.TEST):
        sub = labeled.subset(labeled.splits == which)
        parts[which] = sub.labeled_xy(feature_idx)
    return Splits(
        parts[Split.TRAIN][0],
        parts[Split.TRAIN][1],
        parts[Split.VAL][0],
        parts[Split.VAL][1],
        parts[Split.TEST][0],
        parts[Split.TEST][1],
    )


def sampled_dataset(registry, signal, rng, groups):
    """Stack (label, count, provenance, hidden_truth) groups, all tagged train
    unless 'ratio' is requested."""
    bits, labels, prov, splits, truths = [], [], [], [], []
    for label, count, provenance, hidden, split_mode in groups:
        if count == 0:
            continue
        draw_label = hidden if hidden is not None else label
        bits.append(signal.sample_bits(draw_label, count, rng))
        labels.append(np.full(count, label, dtype=np.uint8))
        prov.append(np.full(count, provenance, dtype=np.uint8))
        truths.append(
            np.full(count, hidden if hidden is not None else fp.NO_TRUTH, dtype=np.uint8)
        )
        if split_mode == "ratio":
            splits.append(fp.assign_splits(count, rng))
        else:
            splits.append(np.full(count, Split.TRAIN, dtype=np.uint8))
    return Dataset(
        registry,
        np.concatenate(bits),
        np.concatenate(labels),
        np.concatenate(prov),
        np.concatenate(splits),
        np.concatenate(truths),
    )


@pytest.fixture(scope="session")
def tiny_world(registry):
    """A small fully-separable pipeline shared by integration tests:
    trained zoo, guards, server, and 5 clients."""
    seed = 2024
    signal = ClassSignal.plant(registry, 1.0, seed)
    corpus = fp.synth_generate(registry, 700, 700, 0, 1.0, seed)
    models = {}
    for name in zoo.MODEL_NAMES:
        # builder seed 7 breaks the plain-SGD plateau within 10 epochs for
        # every CNN kind on this corpus (probed; deterministic)
        spec, net = zoo.build_model(name, registry, "desk", seed=7)
        idx = registry.projection_indices(spec.feature_templates)
        splits = corpus_splits(corpus, idx)
        result = train(
            net,
            splits,
            TrainingConfig(learning_rate=0.15, batch_size=32, epochs=10, seed=seed),
        )
        models[name] = (spec, result.best_net)

    rng = np.random.default_rng(seed + 99)
    server_ds = sampled_dataset(
        registry,
        signal,
        rng,
        [
            (Label.BENIGN, 500, Provenance.SYSTEM, None, "ratio"),
            (Label.BENIGN, 300, Provenance.USER, None, "ratio"),
            (Label.MALWARE, 700, Provenance.USER, None, "ratio"),
        ],
    )
    guards = train_guards(
        server_ds,
        models,
        zoo.CNN_KINDS,
        GuardTrainingConfig(epochs=10, learning_rate=0.3, seed=seed),
    )

    from fedguard.consensus import pseudo_label_batch

    shards = []
    for i in range(5):
        crng = np.random.default_rng([seed, 0xC1, i])
        shard = sampled_dataset(
            registry,
            signal,
            crng,
            [
                (Label.BENIGN, 60, Provenance.SYSTEM, None, "train"),
                (Label.UNLABELED, 50, Provenance.USER, Label.BENIGN, "train"),
                (Label.UNLABELED, 50, Provenance.USER, Label.MALWARE, "train"),
            ],
        )
        pseudo = np.full(len(shard), fp.NO_TRUTH, dtype=np.uint8)
        mask = shard.labels == Label.UNLABELED
        consensus, _, _ = pseudo_label_batch(shard.bits[mask], models, registry)
        pseudo[mask] = consensus
        shards.append((shard, pseudo))

    def make_clients():
        return {
            f"client_{i:02d}": build_client(
                f"client_{i:02d}", shard, pseudo, guards, HeadSpec(), seed=seed + i
            )
            for i, (shard, pseudo) in enumerate(shards)
        }

    return {
        "registry": registry,
        "signal": signal,
        "corpus": corpus,
        "models": models,
        "server_ds": server_ds,
        "guards": guards,
        "make_clients": make_clients,
        "seed": seed,
    }


@pytest.fixture
def fresh_server(tiny_world):
    return FederationServer(tiny_world["guards"], seed=tiny_world["seed"])
