"""Experiment configuration: one flat key=value document.

Unknown keys are errors so a config file can never silently drift from the
code.  A config plus its seed pins an experiment end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from fedguard.errors import ConfigError


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "out"
    scale: str = "desk"

    # synthetic data
    signal_strength: float = 0.9
    planted_per_class: int = 16
    n_benign: int = 2000
    n_malware: int = 2000
    n_unlabeled: int = 400
    n_clients: int = 7
    client_system_apps: int = 120
    client_user_apps: int = 160
    server_system_apps: int = 1000
    server_extra_benign: int = 1000
    server_malware: int = 1000

    # feature-specific model training
    train_epochs: int = 12
    train_batch_size: int = 32
    lr_grid: tuple[float, ...] = (0.3, 0.1, 0.03)
    sweep_epochs: int = 3

    # guard training
    guard_epochs: int = 15
    guard_learning_rate: float = 0.25
    guard_batch_size: int = 32
    threshold_margin: float = 0.02

    # federation
    rounds: int = 20
    clients_per_round: int = 0  # 0 selects every client
    local_epochs: int = 2
    local_learning_rate: float = 0.25
    local_batch_size: int = 32
    weight_check: bool = True
    label_check: bool = False
    match_threshold: float = 0.5
    synchronous: bool = True
    latency_mean: float = 3.5
    latency_std: float = 0.5
    deadline: float = 5.0
    max_label_check_fingerprints: int = 256
    pseudo_weight_max: float = 1.0
    pseudo_ramp_start: int = 0
    pseudo_ramp_end: int = 0

    # attack
    attack_kind: str = "none"
    malicious_fraction: float = 0.0
    attack_lb: int = 0
    attack_ub: int = -1  # -1 extends to the end of the buffer
    flip_fraction: float = 1.0

    def validate(self) -> "ExperimentConfig":
        if self.scale not in ("desk", "paper"):
            raise ConfigError(f"scale must be 'desk' or 'paper', got {self.scale!r}")
        if not 0.5 <= self.signal_strength <= 1.0:
            raise ConfigError("signal_strength must lie in [0.5, 1.0]")
        if self.attack_kind not in (
            "none",
            "weight_manipulation",
            "feature_manipulation",
            "label_flip",
            "combined",
        ):
            raise ConfigError(f"unknown attack_kind {self.attack_kind!r}")
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise ConfigError("malicious_fraction must lie in [0, 1]")
        if self.rounds <= 0 or self.n_clients <= 0:
            raise ConfigError("rounds and n_clients must be positive")
        return self


_KEY_TYPES = {
    "seed": int,
    "out_dir": str,
    "scale": str,
    "signal_strength": float,
    "planted_per_class": int,
    "n_benign": int,
    "n_malware": int,
    "n_unlabeled": int,
    "n_clients": int,
    "client_system_apps": int,
    "client_user_apps": int,
    "server_system_apps": int,
    "server_extra_benign": int,
    "server_malware": int,
    "train_epochs": int,
    "train_batch_size": int,
    "lr_grid": _parse_float_list,
    "sweep_epochs": int,
    "guard_epochs": int,
    "guard_learning_rate": float,
    "guard_batch_size": int,
    "threshold_margin": float,
    "rounds": int,
    "clients_per_round": int,
    "local_epochs": int,
    "local_learning_rate": float,
    "local_batch_size": int,
    "weight_check": _parse_bool,
    "label_check": _parse_bool,
    "match_threshold": float,
    "synchronous": _parse_bool,
    "latency_mean": float,
    "latency_std": float,
    "deadline": float,
    "max_label_check_fingerprints": int,
    "pseudo_weight_max": float,
    "pseudo_ramp_start": int,
    "pseudo_ramp_end": int,
    "attack_kind": str,
    "malicious_fraction": float,
    "attack_lb": int,
    "attack_ub": int,
    "flip_fraction": float,
}

assert set(_KEY_TYPES) == {f.name for f in fields(ExperimentConfig)}


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse 'key = value' lines; '#' starts a comment; unknown keys raise."""
    cfg = base or ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEY_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _KEY_TYPES[key](value))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
