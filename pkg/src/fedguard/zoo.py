"""Builders for the seven feature-specific models.

One CNN over the whole fingerprint ("Static") plus six helpers (HM1-HM6)
over fixed template subsets.  HM1/HM2/HM4 are MLPs; HM3/HM5/HM6 are CNNs.
Two scales share the topology: ``paper`` uses the full layer widths,
``desk`` shrinks them so training stays minutes-scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from fedguard.errors import FormatError
from fedguard.fingerprint import TemplateRegistry
from fedguard.nn import (
    Activation,
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    GridReshape,
    MaxPool,
    Network,
)
from fedguard.nn.checkpoint import load_checkpoint, restore_into, save_checkpoint

MODEL_NAMES = ("Static", "HM1", "HM2", "HM3", "HM4", "HM5", "HM6")
MLP_HELPERS = ("HM1", "HM2", "HM4")
CNN_HELPERS = ("HM3", "HM5", "HM6")
CNN_KINDS = ("Static",) + CNN_HELPERS  # models that get collaborative twins

# Template subsets per model.  Every helper uses a strict subset of the
# Static model's full list.
MODEL_TEMPLATES: dict[str, tuple[str, ...]] = {
    "Static": (
        "manifest-attributes",
        "permissions",
        "protection-levels",
        "device-features",
        "intents",
        "categories",
        "providers",
        "receivers",
        "services",
        "api-classes",
        "api-sensitive-methods",
    ),
    "HM1": ("permissions", "protection-levels", "device-features"),
    "HM2": (
        "permissions",
        "protection-levels",
        "device-features",
        "intents",
        "categories",
        "providers",
        "receivers",
        "services",
    ),
    "HM3": (
        "permissions",
        "protection-levels",
        "device-features",
        "api-classes",
        "api-sensitive-methods",
    ),
    "HM4": ("permissions", "protection-levels", "device-features", "api-classes"),
    "HM5": (
        "permissions",
        "protection-levels",
        "device-features",
        "intents",
        "categories",
        "providers",
        "receivers",
        "services",
        "api-classes",
    ),
    "HM6": (
        "permissions",
        "protection-levels",
        "device-features",
        "intents",
        "categories",
        "providers",
        "receivers",
        "services",
        "api-classes",
        "api-sensitive-methods",
    ),
}

STATIC_FILTERS = {"paper": (16, 32, 64, 128), "desk": (4, 8, 16, 32)}
STATIC_DENSE = {"paper": 1024, "desk": 64}
HELPER_CNN_FILTERS = {"paper": (16, 32, 64, 128), "desk": (4, 8, 16, 32)}
HELPER_CNN_DENSE = {"paper": 1024, "desk": 64}
MLP_HIDDEN = {"paper": (256, 128), "desk": (64, 32)}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    kind: str  # "CNN" or "MLP"
    feature_templates: tuple[str, ...]
    scale: str  # "paper" or "desk"

    def to_metadata(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "kind": self.kind,
                "templates": list(self.feature_templates),
                "scale": self.scale,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_metadata(blob: str) -> "ModelSpec":
        try:
            data = json.loads(blob)
            return ModelSpec(
                data["name"], data["kind"], tuple(data["templates"]), data["scale"]
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"bad checkpoint metadata: {exc}") from exc


def model_spec(name: str, scale: str = "desk") -> ModelSpec:
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model name: {name!r}")
    _check_scale(scale)
    kind = "MLP" if name in MLP_HELPERS else "CNN"
    return ModelSpec(name, kind, MODEL_TEMPLATES[name], scale)


def _check_scale(scale: str) -> None:
    if scale not in ("paper", "desk"):
        raise ValueError(f"unknown scale: {scale!r}")


def grid_side(width: int) -> int:
    """Side of the smallest square grid holding ``width`` features."""
    return math.isqrt(width - 1) + 1 if width > 0 else 0


def build_static(f_sel: int, scale: str, seed: int = 0) -> Network:
    """Full-fingerprint CNN: 4 double-conv blocks, GAP, two tanh dense layers."""
    _check_scale(scale)
    if f_sel < 16:
        raise ValueError("input width must be at least 16")
    side = grid_side(f_sel)
    if side < 16:
        raise ValueError(
            f"{side}x{side} grid cannot survive four 2x2 poolings (needs side >= 16)"
        )
    rng = np.random.default_rng(seed)
    layers = [GridReshape(f_sel, side)]
    channels = 1
    for filters in STATIC_FILTERS[scale]:
        layers += [
            Conv2d(channels, filters, rng),
            Activation("relu"),
            Conv2d(filters, filters, rng),
            Activation("relu"),
            MaxPool(),
        ]
        channels = filters
    layers.append(GlobalAvgPool())
    boundary = len(layers)
    dense = STATIC_DENSE[scale]
    layers += [
        Dense(channels, dense, rng),
        Activation("tanh"),
        Dense(dense, dense, rng),
        Activation("tanh"),
        Dense(dense, 2, rng),
        Activation("sigmoid"),
    ]
    return Network("Static", layers, boundary)


def build_mlp_helper(name: str, f_sel: int, scale: str, seed: int = 0) -> Network:
    """Two-hidden-layer MLP helper; base ends after the first hidden layer."""
    if name not in MLP_HELPERS:
        raise ValueError(f"{name!r} is not an MLP helper (expected one of {MLP_HELPERS})")
    _check_scale(scale)
    rng = np.random.default_rng(seed)
    h1, h2 = MLP_HIDDEN[scale]
    layers = [
        Flatten(),
        Dense(f_sel, h1, rng),
        Activation("tanh"),
    ]
    boundary = len(layers)
    layers += [
        Dense(h1, h2, rng),
        Activation("tanh"),
        Dense(h2, 2, rng),
        Activation("sigmoid"),
    ]
    return Network(name, layers, boundary)


def build_cnn_helper(name: str, f_sel: int, scale: str, seed: int = 0) -> Network:
    """Four single convs with two interleaved pools, GAP, one tanh dense layer."""
    if name not in CNN_HELPERS:
        raise ValueError(f"{name!r} is not a CNN helper (expected one of {CNN_HELPERS})")
    _check_scale(scale)
    side = grid_side(f_sel)
    if side < 4:
        raise ValueError(
            f"{side}x{side} grid cannot survive two 2x2 poolings (needs side >= 4)"
        )
    rng = np.random.default_rng(seed)
    f1, f2, f3, f4 = HELPER_CNN_FILTERS[scale]
    layers = [
        GridReshape(f_sel, side),
        Conv2d(1, f1, rng),
        Activation("relu"),
        Conv2d(f1, f2, rng),
        Activation("relu"),
        MaxPool(),
        Conv2d(f2, f3, rng),
        Activation("relu"),
        Conv2d(f3, f4, rng),
        Activation("relu"),
        MaxPool(),
        GlobalAvgPool(),
    ]
    boundary = len(layers)
    dense = HELPER_CNN_DENSE[scale]
    layers += [
        Dense(f4, dense, rng),
        Activation("tanh"),
        Dense(dense, 2, rng),
        Activation("sigmoid"),
    ]
    return Network(name, layers, boundary)


def build_model(name: str, registry: TemplateRegistry, scale: str = "desk",
                seed: int = 0) -> tuple[ModelSpec, Network]:
    spec = model_spec(name, scale)
    for tpl in spec.feature_templates:
        registry.template(tpl)  # raises KeyError naming the missing template
    width = registry.width_of(spec.feature_templates)
    if name == "Static":
        net = build_static(width, scale, seed)
    elif name in MLP_HELPERS:
        net = build_mlp_helper(name, width, scale, seed)
    else:
        net = build_cnn_helper(name, width, scale, seed)
    return spec, net


def build_all(registry: TemplateRegistry, scale: str = "desk",
              seed: int = 0) -> dict[str, tuple[ModelSpec, Network]]:
    """All seven models, seeded independently per model name."""
    out = {}
    for i, name in enumerate(MODEL_NAMES):
        out[name] = build_model(name, registry, scale, seed=(seed * 31 + i))
    return out


def save_model(spec: ModelSpec, net: Network, path) -> None:
    save_checkpoint(net, path, name=spec.to_metadata())


def load_model(path, registry: TemplateRegistry, seed: int = 0):
    """Rebuild the architecture from checkpoint metadata and load the weights."""
    blob, tensors = load_checkpoint(path)
    spec = ModelSpec.from_metadata(blob)
    rebuilt_spec, net = build_model(spec.name, registry, spec.scale, seed)
    if rebuilt_spec.feature_templates != spec.feature_templates:
        raise FormatError(
            f"checkpoint template list {spec.feature_templates} does not match "
            f"registry-derived list {rebuilt_spec.feature_templates}"
        )
    restore_into(net, tensors)
    return spec, net
