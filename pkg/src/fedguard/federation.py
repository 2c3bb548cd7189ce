"""Simulated federated learning with evaluation-based guards.

Clients train collaborative heads on local data (system apps plus
pseudo-labeled user apps).  Each round the server's guard models evaluate
every submitted head on trusted validation data and, when configured, vote
on the client's fingerprints to catch flipped labels.  Accepted updates are
aggregated by sample-count-weighted averaging; a round that yields nothing
usable re-broadcasts the last usable aggregate.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from fedguard.attacks import Adversary, NullAdversary
from fedguard.consensus import (
    Label,
    PseudoLossSchedule,
    combined_backward_and_step,
    majority_vote,
    pseudo_targets,
)
from fedguard.fingerprint import Dataset, Split, onehot_targets
from fedguard.nn import Network, Splits, TrainingConfig, train
from fedguard.nn.metrics import Metrics, compute_metrics, predict_labels
from fedguard.transfer import (
    CollaborativeModel,
    HeadSpec,
    attach_head,
    build_head,
    export_head,
    import_head,
    split_and_freeze,
)

REASON_BELOW_THRESHOLD = "below_threshold"
REASON_NON_FINITE = "non_finite"
REASON_LABEL_MISMATCH = "label_mismatch"
REASON_STRAGGLER = "straggler"


@dataclass
class ClientUpdate:
    """One client's submission for one model kind."""

    client_id: str
    model_name: str
    weights: np.ndarray
    sample_count: int
    fingerprints: np.ndarray | None = None  # raw bits, on server request
    claimed_labels: np.ndarray | None = None

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.weights).all())


@dataclass
class GuardModel:
    """Server-side evaluator for one model kind.

    The guard owns a head trained exclusively on trusted server data and a
    scratch head used to evaluate client weights against the same frozen
    base.  ``feature_idx`` projects raw fingerprints onto the kind's
    templates.
    """

    model_name: str
    base: Network
    head: Network
    scratch_head: Network
    feature_idx: np.ndarray
    threshold: float
    baseline_accuracy: float
    val_features: np.ndarray
    val_targets: np.ndarray

    def evaluate_update(self, weights: np.ndarray) -> Metrics:
        self.scratch_head.load_weight_vector(np.asarray(weights, dtype=np.float64))
        probs = _forward_head(self.scratch_head, self.val_features)
        return compute_metrics(probs, self.val_targets)

    def own_votes(self, features: np.ndarray) -> np.ndarray:
        return predict_labels(self.head.forward(features))

    def client_votes(self, weights: np.ndarray, features: np.ndarray) -> np.ndarray:
        self.scratch_head.load_weight_vector(np.asarray(weights, dtype=np.float64))
        return predict_labels(_forward_head(self.scratch_head, features))


def _forward_head(head: Network, x: np.ndarray) -> np.ndarray:
    # tolerate non-finite weights: the verdict logic handles them
    out = np.asarray(x, dtype=np.float64)
    for layer in head.layers:
        out = layer.forward(out, cache=False)
    return out


@dataclass
class Verdict:
    status: str  # "accepted" | "excluded"
    reason: str | None = None
    accuracy: float | None = None
    match_rate: float | None = None

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"


def guard_check_weights(guard: GuardModel, update: ClientUpdate) -> Verdict:
    """Accept iff the update is finite and scores at least the guard threshold
    on the server validation set."""
    if not update.is_finite():
        return Verdict("excluded", REASON_NON_FINITE)
    metrics = guard.evaluate_update(update.weights)
    if metrics.accuracy < guard.threshold:
        return Verdict("excluded", REASON_BELOW_THRESHOLD, accuracy=metrics.accuracy)
    return Verdict("accepted", accuracy=metrics.accuracy)


def guard_consensus_labels(guards: dict[str, GuardModel],
                           fingerprints: np.ndarray) -> np.ndarray:
    """Per-fingerprint majority vote over the guards (ties go to malware)."""
    if fingerprints is None or len(fingerprints) == 0:
        raise ValueError("empty fingerprint batch")
    votes = []
    for guard in guards.values():
        features = guard.base.forward(fingerprints[:, guard.feature_idx])
        votes.append(guard.own_votes(features))
    stacked = np.stack(votes)
    out = np.empty(stacked.shape[1], dtype=np.int64)
    for j in range(stacked.shape[1]):
        label, _ = majority_vote([Label(v) for v in stacked[:, j]])
        out[j] = label
    return out


def guard_check_labels(guards: dict[str, GuardModel], update: ClientUpdate,
                       match_threshold: float,
                       consensus: np.ndarray | None = None) -> Verdict:
    """Compare the client model's inferred labels against the guard consensus
    on the same fingerprints; exclude below the match threshold."""
    if update.fingerprints is None or len(update.fingerprints) == 0:
        raise ValueError("label check requires a fingerprint batch")
    if consensus is None:
        consensus = guard_consensus_labels(guards, update.fingerprints)
    guard = guards[update.model_name]
    features = guard.base.forward(update.fingerprints[:, guard.feature_idx])
    client = guard.client_votes(update.weights, features)
    match_rate = float(np.mean(client == consensus))
    if match_rate < match_threshold:
        return Verdict("excluded", REASON_LABEL_MISMATCH, match_rate=match_rate)
    return Verdict("accepted", match_rate=match_rate)


def aggregate(updates: list[ClientUpdate]) -> np.ndarray:
    """Sample-count-weighted mean of the update weight vectors."""
    if not updates:
        raise ValueError("no updates to aggregate")
    names = {u.model_name for u in updates}
    if len(names) != 1:
        raise ValueError(f"mixed model kinds in aggregation: {sorted(names)}")
    lengths = {len(u.weights) for u in updates}
    if len(lengths) != 1:
        raise ValueError("updates have inconsistent weight lengths")
    total = float(sum(u.sample_count for u in updates))
    if total <= 0:
        raise ValueError("total sample count must be positive")
    out = np.zeros(lengths.pop())
    for u in updates:
        out += (u.sample_count / total) * np.asarray(u.weights, dtype=np.float64)
    return out


# ---------------------------------------------------------------------------
# Guard training
# ---------------------------------------------------------------------------


@dataclass
class GuardTrainingConfig:
    head_spec: HeadSpec = field(default_factory=HeadSpec)
    learning_rate: float = 0.25
    batch_size: int = 32
    epochs: int = 15
    threshold_margin: float = 0.02
    seed: int = 0


def train_guards(server_dataset: Dataset, zoo_models: dict[str, tuple],
                 kinds, cfg: GuardTrainingConfig) -> dict[str, GuardModel]:
    """One guard per CNN-based kind, trained on the trusted server dataset.

    The dataset needs both classes (system/benign apps plus a malware
    admixture); each guard records its validation baseline and sets its
    acceptance threshold at baseline minus the configured margin.
    """
    labels = server_dataset.labels
    if not ((labels == Label.BENIGN).any() and (labels == Label.MALWARE).any()):
        raise ValueError("guard training data must contain both classes")
    guards: dict[str, GuardModel] = {}
    for i, kind in enumerate(kinds):
        spec, net = zoo_models[kind]
        idx = server_dataset.registry.projection_indices(spec.feature_templates)
        base, width = split_and_freeze(net)
        train_ds = server_dataset.split(Split.TRAIN)
        val_ds = server_dataset.split(Split.VAL)
        x_train, y_train = train_ds.labeled_xy(idx)
        x_val, y_val = val_ds.labeled_xy(idx)
        feats_train = base.forward(x_train)
        feats_val = base.forward(x_val)
        head = build_head(width, cfg.head_spec, seed=(cfg.seed * 37 + i))
        result = train(
            head,
            Splits(feats_train, y_train, feats_val, y_val),
            TrainingConfig(
                learning_rate=cfg.learning_rate,
                batch_size=cfg.batch_size,
                epochs=cfg.epochs,
                seed=cfg.seed * 37 + i,
            ),
        )
        baseline = max(h.val.accuracy for h in result.history)
        guards[kind] = GuardModel(
            model_name=kind,
            base=base,
            head=result.best_net,
            scratch_head=result.best_net.clone(),
            feature_idx=idx,
            threshold=max(0.0, baseline - cfg.threshold_margin),
            baseline_accuracy=baseline,
            val_features=feats_val,
            val_targets=y_val,
        )
    return guards


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------


@dataclass
class ClientState:
    """A simulated smartphone: local shard, pseudo-labeled training view, and
    one collaborative model per kind."""

    client_id: str
    shard: Dataset
    train_labels: np.ndarray  # system labels + pseudo-labels for user apps
    is_pseudo: np.ndarray  # mask: True where train_labels came from consensus
    models: dict[str, CollaborativeModel]
    base_features: dict[str, np.ndarray]  # cache over the clean shard bits
    epochs_seen: int = 0

    @property
    def sample_count(self) -> int:
        return len(self.shard)


def build_client(client_id: str, shard: Dataset, pseudo_labels: np.ndarray,
                 guards: dict[str, GuardModel], head_spec: HeadSpec,
                 seed: int) -> ClientState:
    """Attach a fresh head per kind to the shared frozen bases and pre-compute
    base features for the shard."""
    labels = shard.labels.copy()
    is_pseudo = labels == Label.UNLABELED
    labels[is_pseudo] = pseudo_labels[is_pseudo]
    models = {}
    features = {}
    for j, (kind, guard) in enumerate(guards.items()):
        cm = attach_head(
            guard.base, head_spec, seed=[seed & 0xFFFFFFFF, 0xC1, j],
            source_name=kind,
        )
        models[kind] = cm
        features[kind] = guard.base.forward(shard.bits[:, guard.feature_idx])
    return ClientState(client_id, shard, labels, is_pseudo, models, features)


def local_train(client: ClientState, kind: str, features: np.ndarray,
                labels: np.ndarray, schedule: PseudoLossSchedule,
                epochs: int, learning_rate: float, batch_size: int,
                rng: np.random.Generator) -> float:
    """Train one collaborative head on cached base features.

    Returns the mean combined loss over all steps (0.0 when epochs == 0).
    """
    head = client.models[kind].head
    targets = pseudo_targets(labels)
    n = len(features)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        weight_epoch = client.epochs_seen + epoch
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            pseudo_mask = client.is_pseudo[idx]
            lab = idx[~pseudo_mask]
            pse = idx[pseudo_mask]
            loss = combined_backward_and_step(
                head,
                (features[lab], targets[lab]),
                (features[pse], targets[pse]),
                weight_epoch,
                schedule,
                learning_rate,
            )
            losses.append(loss)
    return float(np.mean(losses)) if losses else 0.0


# ---------------------------------------------------------------------------
# Rounds
# ---------------------------------------------------------------------------


@dataclass
class RoundConfig:
    local_epochs: int = 2
    local_learning_rate: float = 0.25
    batch_size: int = 32
    clients_per_round: int | None = None  # None: every client participates
    weight_check: bool = True
    label_check: bool = False
    match_threshold: float = 0.5
    synchronous: bool = True
    latency_mean: float = 3.5
    latency_std: float = 0.5
    deadline: float = 5.0
    max_label_check_fingerprints: int = 256
    schedule: PseudoLossSchedule = field(
        default_factory=lambda: PseudoLossSchedule(max_weight=1.0, ramp_start=0, ramp_end=0)
    )


@dataclass
class RoundReport:
    round_index: int
    participants: list[str]
    malicious: list[str]
    attack_kind: str | None
    verdicts: dict[str, dict[str, Verdict]]  # kind -> client_id -> verdict
    aggregates: dict[str, np.ndarray]
    aggregate_finite: dict[str, bool]
    used_fallback: dict[str, bool]
    latencies: dict[str, float]
    local_losses: dict[str, float]
    loss_shares: dict[str, float]

    def excluded_clients(self) -> set[str]:
        out = set()
        for per_client in self.verdicts.values():
            out.update(c for c, v in per_client.items() if not v.accepted)
        return out

    def to_json_obj(self) -> dict:
        return {
            "round": self.round_index,
            "participants": self.participants,
            "malicious": self.malicious,
            "attack_kind": self.attack_kind,
            "verdicts": {
                kind: {
                    cid: {
                        "status": v.status,
                        "reason": v.reason,
                        "accuracy": v.accuracy,
                        "match_rate": v.match_rate,
                    }
                    for cid, v in sorted(per_client.items())
                }
                for kind, per_client in sorted(self.verdicts.items())
            },
            "aggregates": {
                kind: {
                    "sha256": _weights_hash(vec),
                    "norm": float(np.linalg.norm(vec)),
                    "finite": self.aggregate_finite[kind],
                    "fallback": self.used_fallback[kind],
                }
                for kind, vec in sorted(self.aggregates.items())
            },
            "latencies": {c: round(t, 6) for c, t in sorted(self.latencies.items())},
            "local_losses": {c: v for c, v in sorted(self.local_losses.items())},
            "loss_shares": {c: v for c, v in sorted(self.loss_shares.items())},
        }


def _weights_hash(vec: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(vec, dtype=np.float64).tobytes()).hexdigest()


class FederationServer:
    """Holds the guards, the current broadcast, and the last usable aggregate."""

    def __init__(self, guards: dict[str, GuardModel], seed: int = 0):
        self.guards = guards
        self.seed = seed
        # initial broadcast: the guards' own trained heads
        self.broadcast: dict[str, np.ndarray] = {
            kind: guard.head.weight_vector() for kind, guard in guards.items()
        }
        self.reports: list[RoundReport] = []

    @property
    def kinds(self) -> list[str]:
        return list(self.guards.keys())

    def _rng(self, *stream) -> np.random.Generator:
        return np.random.default_rng([self.seed & 0xFFFFFFFF, *stream])

    def select_participants(self, clients: dict[str, ClientState],
                            cfg: RoundConfig, round_index: int) -> list[str]:
        ids = sorted(clients.keys())
        count = cfg.clients_per_round
        if count is None or count >= len(ids):
            return ids
        rng = self._rng(0x5E, round_index)
        picked = rng.choice(len(ids), size=count, replace=False)
        return sorted(ids[i] for i in picked)

    def run_round(self, clients: dict[str, ClientState], cfg: RoundConfig,
                  adversary: Adversary | None = None,
                  round_index: int | None = None) -> RoundReport:
        """One full round: broadcast, local training, guard checks, aggregate."""
        adversary = adversary or NullAdversary(sorted(clients.keys()))
        r = len(self.reports) if round_index is None else round_index
        participants = self.select_participants(clients, cfg, r)
        malicious = adversary.malicious_clients(r) & set(participants)

        updates: dict[str, list[ClientUpdate]] = {k: [] for k in self.kinds}
        latencies: dict[str, float] = {}
        local_losses: dict[str, float] = {}

        for cid in participants:
            client = clients[cid]
            for kind in self.kinds:
                import_head(client.models[kind], self.broadcast[kind])

            bits = client.shard.bits
            labels = client.train_labels
            features = client.base_features
            if cid in malicious and adversary.tampers_data():
                tampered = adversary.tamper_dataset(
                    _training_view(client), cid, r
                )
                bits = tampered.bits
                labels = tampered.labels
                features = {
                    kind: guard.base.forward(bits[:, guard.feature_idx])
                    for kind, guard in self.guards.items()
                }

            kind_losses = []
            for kind in self.kinds:
                rng = self._rng(0x17, r, _client_stream(cid), _kind_stream(kind))
                loss = local_train(
                    client, kind, features[kind], labels, cfg.schedule,
                    cfg.local_epochs, cfg.local_learning_rate, cfg.batch_size, rng,
                )
                kind_losses.append(loss)
            client.epochs_seen += cfg.local_epochs
            local_losses[cid] = float(np.mean(kind_losses))

            fp_batch = None
            claimed = None
            if cfg.label_check:
                cap = cfg.max_label_check_fingerprints
                user_rows = np.flatnonzero(client.is_pseudo)[:cap]
                fp_batch = bits[user_rows]
                claimed = labels[user_rows]

            for kind in self.kinds:
                weights = export_head(client.models[kind])
                if cid in malicious:
                    weights = adversary.tamper_weights(weights, cid, kind, r)
                updates[kind].append(
                    ClientUpdate(cid, kind, weights, client.sample_count,
                                 fp_batch, claimed)
                )

            lat_rng = self._rng(0x1A, r, _client_stream(cid))
            latencies[cid] = max(
                0.0, float(lat_rng.normal(cfg.latency_mean, cfg.latency_std))
            )

        report = self.process_updates(updates, cfg, r, participants, latencies)
        report.malicious = sorted(malicious)
        report.attack_kind = adversary.cfg.kind if malicious else None
        report.local_losses = local_losses
        total_loss = sum(local_losses.values())
        report.loss_shares = {
            cid: (loss / total_loss if total_loss > 0 else 0.0)
            for cid, loss in local_losses.items()
        }
        self.reports.append(report)
        return report

    def process_updates(self, updates: dict[str, list[ClientUpdate]],
                        cfg: RoundConfig, round_index: int,
                        participants: list[str],
                        latencies: dict[str, float]) -> RoundReport:
        """Guard checks plus aggregation; exposed separately so tests can
        drive the server with synthetic updates."""
        verdicts: dict[str, dict[str, Verdict]] = {}
        aggregates: dict[str, np.ndarray] = {}
        finite: dict[str, bool] = {}
        fallback: dict[str, bool] = {}

        # fingerprint batches are shared across kinds, so the guard consensus
        # is computed once per client
        consensus_cache: dict[str, np.ndarray] = {}
        if cfg.label_check:
            first_kind = next((lst for lst in updates.values() if lst), [])
            for update in first_kind:
                if update.fingerprints is not None and len(update.fingerprints):
                    consensus_cache[update.client_id] = guard_consensus_labels(
                        self.guards, update.fingerprints
                    )

        for kind, kind_updates in updates.items():
            guard = self.guards[kind]
            verdicts[kind] = {}
            accepted = []
            for update in kind_updates:
                cid = update.client_id
                if not cfg.synchronous and latencies.get(cid, 0.0) > cfg.deadline:
                    verdicts[kind][cid] = Verdict("excluded", REASON_STRAGGLER)
                    continue
                if cfg.weight_check:
                    verdict = guard_check_weights(guard, update)
                    if not verdict.accepted:
                        verdicts[kind][cid] = verdict
                        continue
                else:
                    verdict = Verdict("accepted")
                if cfg.label_check:
                    label_verdict = guard_check_labels(
                        self.guards, update, cfg.match_threshold,
                        consensus_cache.get(cid),
                    )
                    label_verdict.accuracy = verdict.accuracy
                    verdict = label_verdict
                verdicts[kind][cid] = verdict
                if verdict.accepted:
                    accepted.append(update)

            if accepted:
                agg = aggregate(accepted)
                if np.isfinite(agg).all():
                    aggregates[kind] = agg
                    finite[kind] = True
                    fallback[kind] = False
                    self.broadcast[kind] = agg
                    continue
                finite[kind] = False
            else:
                finite[kind] = True
            # zero accepted updates or a non-finite mean: keep the last
            # usable aggregate as this round's broadcast
            aggregates[kind] = self.broadcast[kind]
            fallback[kind] = True

        return RoundReport(
            round_index=round_index,
            participants=list(participants),
            malicious=[],
            attack_kind=None,
            verdicts=verdicts,
            aggregates=aggregates,
            aggregate_finite=finite,
            used_fallback=fallback,
            latencies=latencies,
            local_losses={},
            loss_shares={},
        )


def _training_view(client: ClientState) -> Dataset:
    """The client's shard with pseudo-labels substituted for 'unlabeled'."""
    view = copy.copy(client.shard)
    view.labels = client.train_labels
    return view


def _client_stream(cid: str) -> int:
    return int.from_bytes(hashlib.sha256(cid.encode()).digest()[:4], "little")


def _kind_stream(kind: str) -> int:
    return int.from_bytes(hashlib.sha256(kind.encode()).digest()[:4], "little")
