"""Experiment harness: configuration, data/run orchestration, and the CLI."""

from fedguard.harness.config import ExperimentConfig, load_config, parse_config

__all__ = ["ExperimentConfig", "load_config", "parse_config"]
