"""Command-line entry point.

Subcommands mirror the pipeline stages; every flag overrides the matching
config-file key.  Failures print one machine-readable line to stderr
(``error=<CODE> msg="..."``) and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import sys

from fedguard.errors import ConfigError, error_code
from fedguard.harness import runner
from fedguard.harness.config import ExperimentConfig, load_config, parse_config

_COMMANDS = {
    "gen-data": runner.cmd_gen_data,
    "train-zoo": runner.cmd_train_zoo,
    "pseudo-eval": runner.cmd_pseudo_eval,
    "train-guards": runner.cmd_train_guards,
    "federate": runner.cmd_federate,
    "attack-bench": runner.cmd_attack_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedguard",
        description="Synthetic malware-fingerprint models with guarded federation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="path to a key=value config file")
        cmd.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a single config key (repeatable)",
        )
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--out-dir", default=None)
        if name == "federate":
            cmd.add_argument("--rounds", type=int, default=None)
            cmd.add_argument("--clients", type=int, default=None)
            cmd.add_argument("--malicious-fraction", type=float, default=None)
            cmd.add_argument("--attack", default=None)
            cmd.add_argument("--theta-margin", type=float, default=None)
            cmd.add_argument("--async", dest="asynchronous", action="store_true")
            cmd.add_argument("--label-check", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = "\n".join(args.set)
    if overrides:
        cfg = parse_config(overrides, base=cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if args.command == "federate":
        if args.seed is None:
            raise ConfigError("federate requires --seed")
        if args.rounds is not None:
            cfg.rounds = args.rounds
        if args.clients is not None:
            cfg.n_clients = args.clients
        if args.malicious_fraction is not None:
            cfg.malicious_fraction = args.malicious_fraction
        if args.attack is not None:
            cfg.attack_kind = args.attack
        if args.theta_margin is not None:
            cfg.threshold_margin = args.theta_margin
        if args.asynchronous:
            cfg.synchronous = False
        if args.label_check:
            cfg.label_check = True
    return cfg.validate()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        result = _COMMANDS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - single-line error contract
        sys.stderr.write(f'error={error_code(exc)} msg="{exc}"\n')
        return 1
    json.dump(result, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
