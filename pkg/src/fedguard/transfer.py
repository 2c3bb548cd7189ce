"""Transfer learning: freeze a pre-trained base, attach a fresh trainable head.

The head is the only part that trains on-device and the only part that is
exchanged during federation; base weights are deep-copied at split time and
made read-only so nothing can mutate them afterwards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from fedguard.nn import Activation, Dense, Network
from fedguard.nn.checkpoint import save_tensors


@dataclass(frozen=True)
class HeadSpec:
    """Replacement classification head: dense widths, tanh, sigmoid(2) output."""

    hidden: tuple[int, ...] = (64, 32)

    def param_count(self, in_width: int) -> int:
        total = 0
        prev = in_width
        for width in self.hidden + (2,):
            total += prev * width + width
            prev = width
        return total


def split_and_freeze(net: Network) -> tuple[Network, int]:
    """Deep-copy the base layers, mark them untrainable, report the head width.

    The returned base is a standalone network whose weight buffers are
    read-only; training steps can never alter them.
    """
    if net.base_boundary <= 0:
        raise ValueError(f"network {net.name!r} has no base boundary set")
    base = Network(f"{net.name}-base", [l.clone() for l in net.base_layers()], 0)
    for layer in base.layers:
        layer.trainable = False
        for arr in layer.params:
            arr.setflags(write=False)
    return base, _base_width(base)


def _input_width(net: Network) -> int:
    first = net.layers[0]
    if hasattr(first, "in_width"):
        return first.in_width
    if hasattr(first, "w"):
        return first.w.shape[0]
    # flatten-first MLPs: the next layer carries the width
    for layer in net.layers:
        if hasattr(layer, "w"):
            return layer.w.shape[0]
    raise ValueError("cannot infer network input width")


def build_head(in_width: int, spec: HeadSpec, seed) -> Network:
    rng = np.random.default_rng(seed)
    layers = []
    prev = in_width
    for width in spec.hidden:
        layers += [Dense(prev, width, rng), Activation("tanh")]
        prev = width
    layers += [Dense(prev, 2, rng), Activation("sigmoid")]
    return Network("head", layers, 0)


@dataclass
class CollaborativeModel:
    """Frozen shared base plus an exclusively owned trainable head."""

    source_name: str
    base: Network
    head: Network
    head_spec: HeadSpec = field(default_factory=HeadSpec)

    def base_features(self, x: np.ndarray) -> np.ndarray:
        return self.base.forward(x)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.head.forward(self.base.forward(x))

    def is_finite(self) -> bool:
        return self.head.is_finite()


def attach_head(base: Network, head_spec: HeadSpec, seed, *,
                source_name: str | None = None,
                expected_width: int | None = None) -> CollaborativeModel:
    """Freshly initialize a head under ``seed`` and compose it with ``base``."""
    width = _base_width(base)
    if expected_width is not None and width != expected_width:
        raise ValueError(
            f"head expects input width {expected_width}, base produces {width}"
        )
    head = build_head(width, head_spec, seed)
    return CollaborativeModel(source_name or base.name, base, head, head_spec)


def _base_width(base: Network) -> int:
    probe = np.zeros((1, _input_width(base)))
    return base.forward(probe).shape[1]


def export_head(cm: CollaborativeModel) -> np.ndarray:
    """Flat copy of the head weights (the unit exchanged during federation)."""
    return cm.head.weight_vector()


def import_head(cm: CollaborativeModel, vec: np.ndarray) -> bool:
    """Replace the head weights; returns the finiteness flag.

    Non-finite values are accepted deliberately - the federation layer owns
    the policy for handling them.
    """
    vec = np.asarray(vec, dtype=np.float64)
    expected = cm.head.param_count(trainable_only=True)
    if vec.shape != (expected,):
        raise ValueError(
            f"head weight vector has length {vec.shape[0] if vec.ndim == 1 else vec.shape}, "
            f"expected {expected}"
        )
    cm.head.load_weight_vector(vec)
    return bool(np.isfinite(vec).all())


def save_head(cm: CollaborativeModel, path) -> None:
    meta = json.dumps(
        {"name": cm.source_name, "head_only": True, "hidden": list(cm.head_spec.hidden)},
        sort_keys=True,
    )
    save_tensors(meta, cm.head.param_arrays(), path)
