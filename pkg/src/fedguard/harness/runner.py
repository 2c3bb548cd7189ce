"""Pipeline stages behind the CLI subcommands.

Each stage reads its inputs from ``cfg.out_dir``, writes flat CSV/JSON-lines
artifacts back into it, and is deterministic given the config and seed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from fedguard import fingerprint as fp
from fedguard import zoo
from fedguard.attacks import Adversary, AttackConfig, NullAdversary
from fedguard.consensus import PseudoLossSchedule, pseudo_label_batch
from fedguard.errors import ConfigError
from fedguard.federation import (
    ClientState,
    FederationServer,
    GuardTrainingConfig,
    RoundConfig,
    build_client,
    train_guards,
)
from fedguard.fingerprint import ClassSignal, Dataset, Label, Provenance, Split
from fedguard.harness.config import ExperimentConfig
from fedguard.nn import Splits, TrainingConfig, evaluate, lr_sweep, train
from fedguard.nn.checkpoint import write_history_csv
from fedguard.transfer import HeadSpec

CORPUS_FILE = "corpus.adfp"
SERVER_FILE = "server.adfp"
CLIENT_FILE = "client_{:02d}.adfp"
MODEL_FILE = "model_{}.adwt"


def _out(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _signal(cfg: ExperimentConfig, registry) -> ClassSignal:
    return ClassSignal.plant(
        registry, cfg.signal_strength, cfg.seed, cfg.planted_per_class
    )


def _sampled_dataset(registry, signal: ClassSignal, rng, groups) -> Dataset:
    """Stack (label, count, provenance, hidden, split_mode) groups into one
    dataset.  split_mode: 'ratio' assigns 80:10:10, 'train' tags everything
    train."""
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


def cmd_gen_data(cfg: ExperimentConfig) -> dict:
    """Write the training corpus, the server guard dataset, and one shard per
    client."""
    out = _out(cfg)
    registry = fp.default_registry()
    corpus = fp.synth_generate(
        registry,
        cfg.n_benign,
        cfg.n_malware,
        cfg.n_unlabeled,
        cfg.signal_strength,
        cfg.seed,
        cfg.planted_per_class,
    )
    fp.save_dataset(corpus, out / CORPUS_FILE)

    signal = _signal(cfg, registry)
    server_rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0x5EF])
    server = _sampled_dataset(
        registry,
        signal,
        server_rng,
        [
            (Label.BENIGN, cfg.server_system_apps, Provenance.SYSTEM, None, "ratio"),
            (Label.BENIGN, cfg.server_extra_benign, Provenance.USER, None, "ratio"),
            (Label.MALWARE, cfg.server_malware, Provenance.USER, None, "ratio"),
        ],
    )
    fp.save_dataset(server, out / SERVER_FILE)

    paths = {"corpus": str(out / CORPUS_FILE), "server": str(out / SERVER_FILE)}
    for i in range(cfg.n_clients):
        rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0xC11E, i])
        n_user = cfg.client_user_apps
        half = n_user // 2
        shard = _sampled_dataset(
            registry,
            signal,
            rng,
            [
                (Label.BENIGN, cfg.client_system_apps, Provenance.SYSTEM, None, "train"),
                (Label.UNLABELED, half, Provenance.USER, Label.BENIGN, "train"),
                (Label.UNLABELED, n_user - half, Provenance.USER, Label.MALWARE, "train"),
            ],
        )
        path = out / CLIENT_FILE.format(i)
        fp.save_dataset(shard, path)
        paths[f"client_{i:02d}"] = str(path)
    return paths


def _corpus_splits(corpus: Dataset, feature_idx) -> Splits:
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


def cmd_train_zoo(cfg: ExperimentConfig) -> dict:
    """Learning-rate sweep plus full training for all seven models."""
    out = _out(cfg)
    corpus_path = out / CORPUS_FILE
    if not corpus_path.exists():
        raise ConfigError(f"missing dataset {corpus_path}; run gen-data first")
    corpus = fp.load_dataset(corpus_path)
    registry = corpus.registry
    summary = {}
    for i, name in enumerate(zoo.MODEL_NAMES):
        spec = zoo.model_spec(name, cfg.scale)
        idx = registry.projection_indices(spec.feature_templates)
        splits = _corpus_splits(corpus, idx)
        build_seed = cfg.seed * 31 + i

        def builder():
            return zoo.build_model(name, registry, cfg.scale, build_seed)[1]

        sweep = lr_sweep(
            builder,
            splits,
            cfg.lr_grid,
            epochs=cfg.sweep_epochs,
            batch_size=cfg.train_batch_size,
            seed=cfg.seed,
        )
        result = train(
            builder(),
            splits,
            TrainingConfig(
                learning_rate=sweep.best_learning_rate,
                batch_size=cfg.train_batch_size,
                epochs=cfg.train_epochs,
                seed=cfg.seed,
            ),
        )
        zoo.save_model(spec, result.best_net, out / MODEL_FILE.format(name))
        write_history_csv(result.history, out / f"history_{name}.csv")
        test_metrics = evaluate(result.best_net, splits.x_test, splits.y_test)
        summary[name] = {
            "learning_rate": sweep.best_learning_rate,
            "sweep": [
                {
                    "learning_rate": e.learning_rate,
                    "best_val_accuracy": e.best_val_accuracy,
                    "diverged": e.diverged,
                }
                for e in sweep.entries
            ],
            "best_epoch": result.best_epoch,
            "test_accuracy": test_metrics.accuracy,
            "test_f1": test_metrics.f1,
            "test_loss": test_metrics.loss,
        }
    with open(out / "zoo_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def load_zoo(cfg: ExperimentConfig, registry) -> dict[str, tuple]:
    out = Path(cfg.out_dir)
    models = {}
    for name in zoo.MODEL_NAMES:
        path = out / MODEL_FILE.format(name)
        if not path.exists():
            raise ConfigError(f"missing checkpoint {path}; run train-zoo first")
        models[name] = zoo.load_model(path, registry)
    return models


def _load_clients_raw(cfg: ExperimentConfig):
    out = Path(cfg.out_dir)
    shards = []
    for i in range(cfg.n_clients):
        path = out / CLIENT_FILE.format(i)
        if not path.exists():
            raise ConfigError(f"missing client shard {path}; run gen-data first")
        shards.append(fp.load_dataset(path))
    return shards


def cmd_pseudo_eval(cfg: ExperimentConfig) -> dict:
    """Per-model agreement with the consensus and with hidden ground truth,
    one column per client (models x clients matrices)."""
    out = _out(cfg)
    shards = _load_clients_raw(cfg)
    registry = shards[0].registry
    models = load_zoo(cfg, registry)
    names = list(models.keys())
    consensus_match = np.zeros((len(names), len(shards)))
    truth_match = np.zeros((len(names), len(shards)))
    for c, shard in enumerate(shards):
        user = shard.subset(shard.labels == Label.UNLABELED)
        consensus, votes, _ = pseudo_label_batch(user.bits, models, registry)
        truth = user.true_labels.astype(np.int64)
        for m in range(len(names)):
            consensus_match[m, c] = float(np.mean(votes[m] == consensus))
            truth_match[m, c] = float(np.mean(votes[m] == truth))
    result = {
        "models": names,
        "clients": [f"client_{i:02d}" for i in range(len(shards))],
        "consensus_match": consensus_match.tolist(),
        "truth_match": truth_match.tolist(),
    }
    with open(out / "pseudo_eval.json", "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    for stem, matrix in (
        ("pseudo_consensus_match", consensus_match),
        ("pseudo_truth_match", truth_match),
    ):
        with open(out / f"{stem}.csv", "w") as fh:
            fh.write("model," + ",".join(result["clients"]) + "\n")
            for m, name in enumerate(names):
                fh.write(name + "," + ",".join(f"{v:.6f}" for v in matrix[m]) + "\n")
    return result


def _guard_config(cfg: ExperimentConfig) -> GuardTrainingConfig:
    return GuardTrainingConfig(
        head_spec=HeadSpec(),
        learning_rate=cfg.guard_learning_rate,
        batch_size=cfg.guard_batch_size,
        epochs=cfg.guard_epochs,
        threshold_margin=cfg.threshold_margin,
        seed=cfg.seed,
    )


def cmd_train_guards(cfg: ExperimentConfig) -> dict:
    out = _out(cfg)
    server_path = out / SERVER_FILE
    if not server_path.exists():
        raise ConfigError(f"missing server dataset {server_path}; run gen-data first")
    server_ds = fp.load_dataset(server_path)
    models = load_zoo(cfg, server_ds.registry)
    guards = train_guards(server_ds, models, zoo.CNN_KINDS, _guard_config(cfg))
    summary = {
        kind: {
            "baseline_accuracy": g.baseline_accuracy,
            "threshold": g.threshold,
            "head_parameters": int(g.head.param_count()),
        }
        for kind, g in guards.items()
    }
    with open(out / "guards.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def build_simulation(cfg: ExperimentConfig):
    """Guards, clients (with consensus pseudo-labels), and the server."""
    out = Path(cfg.out_dir)
    server_ds = fp.load_dataset(out / SERVER_FILE)
    registry = server_ds.registry
    models = load_zoo(cfg, registry)
    guards = train_guards(server_ds, models, zoo.CNN_KINDS, _guard_config(cfg))
    shards = _load_clients_raw(cfg)
    clients: dict[str, ClientState] = {}
    for i, shard in enumerate(shards):
        cid = f"client_{i:02d}"
        pseudo = np.full(len(shard), fp.NO_TRUTH, dtype=np.uint8)
        user_mask = shard.labels == Label.UNLABELED
        if user_mask.any():
            consensus, _, _ = pseudo_label_batch(
                shard.bits[user_mask], models, registry
            )
            pseudo[user_mask] = consensus
        clients[cid] = build_client(
            cid, shard, pseudo, guards, HeadSpec(), seed=cfg.seed * 101 + i
        )
    server = FederationServer(guards, seed=cfg.seed)
    return server, clients


def _round_config(cfg: ExperimentConfig) -> RoundConfig:
    return RoundConfig(
        local_epochs=cfg.local_epochs,
        local_learning_rate=cfg.local_learning_rate,
        batch_size=cfg.local_batch_size,
        clients_per_round=cfg.clients_per_round or None,
        weight_check=cfg.weight_check,
        label_check=cfg.label_check,
        match_threshold=cfg.match_threshold,
        synchronous=cfg.synchronous,
        latency_mean=cfg.latency_mean,
        latency_std=cfg.latency_std,
        deadline=cfg.deadline,
        max_label_check_fingerprints=cfg.max_label_check_fingerprints,
        schedule=PseudoLossSchedule(
            max_weight=cfg.pseudo_weight_max,
            ramp_start=cfg.pseudo_ramp_start,
            ramp_end=cfg.pseudo_ramp_end,
        ),
    )


def make_adversary(cfg: ExperimentConfig, client_ids: list[str]) -> Adversary:
    if cfg.attack_kind == "none" or cfg.malicious_fraction == 0.0:
        return NullAdversary(client_ids)
    return Adversary(
        AttackConfig(
            kind=cfg.attack_kind,
            lb=cfg.attack_lb,
            ub=None if cfg.attack_ub < 0 else cfg.attack_ub,
            seed=cfg.seed,
            malicious_fraction=cfg.malicious_fraction,
            flip_fraction=cfg.flip_fraction,
        ),
        client_ids,
    )


def cmd_federate(cfg: ExperimentConfig) -> dict:
    """Run the configured number of rounds and write rounds.jsonl + summary."""
    out = _out(cfg)
    server, clients = build_simulation(cfg)
    adversary = make_adversary(cfg, sorted(clients.keys()))
    round_cfg = _round_config(cfg)
    rounds_path = out / "rounds.jsonl"
    match_rates: dict[str, list[float]] = {k: [] for k in server.kinds}
    accuracy_track: list[dict] = []
    with open(rounds_path, "w") as fh:
        for r in range(cfg.rounds):
            report = server.run_round(clients, round_cfg, adversary, r)
            fh.write(json.dumps(report.to_json_obj(), sort_keys=True) + "\n")
            for kind in server.kinds:
                rates = [
                    v.match_rate
                    for v in report.verdicts[kind].values()
                    if v.match_rate is not None
                ]
                if rates:
                    match_rates[kind].append(float(np.mean(rates)))
            accuracy_track.append(
                {
                    kind: server.guards[kind]
                    .evaluate_update(server.broadcast[kind])
                    .accuracy
                    for kind in server.kinds
                }
            )
    exclusions = [
        {
            "round": rep.round_index,
            "excluded": sorted(rep.excluded_clients()),
            "malicious": rep.malicious,
        }
        for rep in server.reports
    ]
    summary = {
        "rounds": cfg.rounds,
        "kinds": server.kinds,
        "exclusions_per_round": exclusions,
        "broadcast_accuracy": accuracy_track,
        "mean_match_rate": {
            kind: (float(np.mean(vals)) if vals else None)
            for kind, vals in match_rates.items()
        },
        "guard_thresholds": {
            kind: server.guards[kind].threshold for kind in server.kinds
        },
    }
    with open(out / "federate_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def cmd_attack_bench(cfg: ExperimentConfig, draws: int = 100_000) -> dict:
    """Monte-Carlo statistics of the attack primitives."""
    from fedguard.attacks import manipulate_features, manipulate_weights

    out = _out(cfg)
    rng = np.random.default_rng(cfg.seed)
    length = max(16, draws)
    weights = np.ones(length)
    lb, ub = 0, draws
    tampered = manipulate_weights(weights, lb, ub, rng)
    multipliers = tampered[lb:ub] / weights[lb:ub]
    bits = np.zeros(length)
    flipped = manipulate_features(bits, lb, ub, rng)
    result = {
        "draws": draws,
        "weight_multiplier_mean": float(np.mean(multipliers)),
        "weight_multiplier_bound": float(ub - lb),
        "weight_multiplier_mean_over_bound": float(
            abs(np.mean(multipliers)) / (ub - lb)
        ),
        "feature_slice_density": float(np.mean(flipped[lb:ub])),
        "complement_untouched": bool(
            np.array_equal(tampered[ub:], weights[ub:])
            and np.array_equal(flipped[ub:], bits[ub:])
        ),
    }
    with open(out / "attack_bench.json", "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    return result
