"""Fingerprint-based malware classifiers with guarded federated learning.

The package simulates the full pipeline on synthetic data: feature-template
fingerprints, a small neural-network engine, a zoo of feature-specific
models, consensus pseudo-labeling, transfer-learning base/head splits, and a
federated server whose guard models filter poisoned client updates.
"""

__version__ = "0.1.0"

from fedguard.errors import ConfigError, FormatError

__all__ = ["ConfigError", "FormatError", "__version__"]
