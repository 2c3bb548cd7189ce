"""Application fingerprints: feature templates, datasets, and file formats.

A fingerprint is a one-hot float vector partitioned into named, disjoint
feature templates (permissions, intents, API classes, ...).  This module
owns the template registry, projection onto template subsets, the synthetic
corpus generator that stands in for a real app corpus, and the on-disk
formats (binary ``ADFP`` plus a JSON-lines twin).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from fedguard.errors import FormatError

FILE_MAGIC = b"ADFP"
FILE_VERSION = 1
TRUTH_MAGIC = b"ADGT"
NO_TRUTH = 255

# Category names, in fingerprint order.  Widths are desk-scale stand-ins for
# real per-category feature counts; permissions dominate as they do in
# practice.  They sum to DEFAULT_FEATURE_COUNT.
TEMPLATE_NAMES = (
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
)
DEFAULT_WIDTHS = (8, 64, 8, 24, 32, 12, 8, 12, 12, 40, 36)
DEFAULT_FEATURE_COUNT = sum(DEFAULT_WIDTHS)


class Label(IntEnum):
    BENIGN = 0
    MALWARE = 1
    UNLABELED = 2


class Provenance(IntEnum):
    SYSTEM = 0
    USER = 1
    SYNTHETIC = 2


class Split(IntEnum):
    TRAIN = 0
    VAL = 1
    TEST = 2


@dataclass(frozen=True)
class FeatureTemplate:
    """A named half-open index interval [start, end) of the fingerprint."""

    name: str
    start: int
    end: int

    @property
    def width(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class TemplateRegistry:
    """Ordered feature templates exactly covering [0, total_features)."""

    templates: tuple[FeatureTemplate, ...]
    total_features: int

    def __post_init__(self):
        cursor = 0
        seen = set()
        for tpl in self.templates:
            if tpl.name in seen:
                raise ValueError(f"duplicate template name: {tpl.name!r}")
            seen.add(tpl.name)
            if tpl.start != cursor:
                raise ValueError(
                    f"template {tpl.name!r} starts at {tpl.start}, expected {cursor}"
                )
            if tpl.width <= 0:
                raise ValueError(f"template {tpl.name!r} has non-positive width")
            cursor = tpl.end
        if cursor != self.total_features:
            raise ValueError(
                f"templates cover [0, {cursor}) but total_features={self.total_features}"
            )

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.templates)

    def template(self, name: str) -> FeatureTemplate:
        for tpl in self.templates:
            if tpl.name == name:
                return tpl
        raise KeyError(f"unknown template: {name!r}")

    def width_of(self, names: Iterable[str]) -> int:
        return sum(self.template(n).width for n in names)

    def projection_indices(self, names: Sequence[str]) -> np.ndarray:
        """Flat feature indices of the named templates, in registry order."""
        if not names:
            raise ValueError("empty template selection")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate names in selection: {list(names)}")
        wanted = set(names)
        for n in wanted:
            self.template(n)  # raises KeyError for unknown names
        parts = [
            np.arange(t.start, t.end) for t in self.templates if t.name in wanted
        ]
        return np.concatenate(parts)


def build_registry(spec: Sequence[tuple[str, int]]) -> TemplateRegistry:
    """Assign contiguous index ranges to (name, width) pairs in list order."""
    if not spec:
        raise ValueError("registry spec is empty")
    templates = []
    cursor = 0
    for name, width in spec:
        if width <= 0:
            raise ValueError(f"template {name!r} has zero or negative width")
        templates.append(FeatureTemplate(name, cursor, cursor + width))
        cursor += width
    return TemplateRegistry(tuple(templates), cursor)


def default_registry() -> TemplateRegistry:
    return build_registry(list(zip(TEMPLATE_NAMES, DEFAULT_WIDTHS)))


@dataclass(frozen=True)
class Fingerprint:
    """One app's feature vector; every value is exactly 0.0 or 1.0."""

    bits: np.ndarray
    app_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=np.float64))
        _check_bits(self.bits)


def _check_bits(bits: np.ndarray) -> None:
    bad = (bits != 0.0) & (bits != 1.0)
    if bad.any():
        idx = int(np.argwhere(bad)[0][-1])
        raise ValueError(f"fingerprint value outside {{0,1}} at index {idx}")


def project(
    fp: Fingerprint, registry: TemplateRegistry, names: Sequence[str]
) -> Fingerprint:
    """Concatenate the named templates' slices of ``fp`` in registry order."""
    if fp.bits.shape[0] != registry.total_features:
        raise ValueError(
            f"fingerprint length {fp.bits.shape[0]} != registry "
            f"total_features {registry.total_features}"
        )
    idx = registry.projection_indices(names)
    return Fingerprint(fp.bits[idx].copy(), fp.app_id)


@dataclass(frozen=True)
class LabeledSample:
    fingerprint: Fingerprint
    label: Label
    provenance: Provenance
    split: Split
    true_label: int = NO_TRUTH  # hidden ground truth for unlabeled samples

    def __post_init__(self):
        if self.provenance == Provenance.SYSTEM and self.label != Label.BENIGN:
            raise ValueError("system-provenance samples must be labeled benign")


@dataclass
class Dataset:
    """A registry plus sample arrays (struct-of-arrays for numpy friendliness).

    ``true_labels`` holds the hidden ground truth of unlabeled samples
    (NO_TRUTH when absent); it exists for evaluation harnesses only and must
    never feed training.
    """

    registry: TemplateRegistry
    bits: np.ndarray  # (n, F) float64, values in {0, 1}
    labels: np.ndarray  # (n,) uint8
    provenance: np.ndarray  # (n,) uint8
    splits: np.ndarray  # (n,) uint8
    true_labels: np.ndarray  # (n,) uint8, NO_TRUTH when unknown
    app_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = self.bits.shape[0]
        if self.bits.ndim != 2 or self.bits.shape[1] != self.registry.total_features:
            raise ValueError("bits shape does not match registry total_features")
        _check_bits(self.bits)
        for arr_name in ("labels", "provenance", "splits", "true_labels"):
            if getattr(self, arr_name).shape != (n,):
                raise ValueError(f"{arr_name} length != sample count")
        system = self.provenance == Provenance.SYSTEM
        if ((self.labels != Label.BENIGN) & system).any():
            raise ValueError("system-provenance samples must be labeled benign")
        if not self.app_ids:
            self.app_ids = [f"app-{i:06d}" for i in range(n)]
        elif len(self.app_ids) != n:
            raise ValueError("app_ids length != sample count")

    def __len__(self) -> int:
        return self.bits.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.registry == other.registry
            and np.array_equal(self.bits, other.bits)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.provenance, other.provenance)
            and np.array_equal(self.splits, other.splits)
            and np.array_equal(self.true_labels, other.true_labels)
            and self.app_ids == other.app_ids
        )

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(
            Fingerprint(self.bits[i].copy(), self.app_ids[i]),
            Label(self.labels[i]),
            Provenance(self.provenance[i]),
            Split(self.splits[i]),
            int(self.true_labels[i]),
        )

    def subset(self, mask: np.ndarray) -> "Dataset":
        idx = np.flatnonzero(mask)
        return Dataset(
            self.registry,
            self.bits[idx].copy(),
            self.labels[idx].copy(),
            self.provenance[idx].copy(),
            self.splits[idx].copy(),
            self.true_labels[idx].copy(),
            [self.app_ids[i] for i in idx],
        )

    def split(self, which: Split) -> "Dataset":
        return self.subset(self.splits == which)

    def labeled_xy(self, feature_idx: np.ndarray | None = None):
        """(X, Y) arrays for labeled samples; Y is one-hot [benign, malware]."""
        mask = self.labels != Label.UNLABELED
        x = self.bits[mask]
        if feature_idx is not None:
            x = x[:, feature_idx]
        y = np.zeros((x.shape[0], 2))
        y[np.arange(x.shape[0]), self.labels[mask]] = 1.0
        return x, y


def onehot_targets(labels: np.ndarray) -> np.ndarray:
    """One-hot [benign, malware] rows for an array of 0/1 labels."""
    y = np.zeros((labels.shape[0], 2))
    y[np.arange(labels.shape[0]), labels] = 1.0
    return y


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassSignal:
    """Per-class planted feature indices shared across generated datasets.

    Planted indices fire with probability ``signal_strength`` for their own
    class and ``1 - signal_strength`` for the other; all remaining indices
    fire with the class-independent ``background_rate``.  Planting is spread
    across every template (at least one planted index per template per class)
    so that any template subset carries signal.
    """

    registry: TemplateRegistry
    benign_idx: np.ndarray
    malware_idx: np.ndarray
    signal_strength: float
    background_rate: float = 0.1

    @staticmethod
    def plant(
        registry: TemplateRegistry,
        signal_strength: float,
        seed,
        planted_per_class: int = 16,
    ) -> "ClassSignal":
        if not 0.5 <= signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in [0.5, 1.0]")
        rng = np.random.default_rng([_seed_int(seed), 0x51])
        total = registry.total_features
        benign, malware = [], []
        for tpl in registry.templates:
            k = max(1, round(planted_per_class * tpl.width / total))
            if 2 * k > tpl.width:
                k = tpl.width // 2
            picks = rng.choice(tpl.width, size=2 * k, replace=False) + tpl.start
            benign.extend(picks[:k])
            malware.extend(picks[k:])
        return ClassSignal(
            registry,
            np.sort(np.asarray(benign)),
            np.sort(np.asarray(malware)),
            float(signal_strength),
        )

    def firing_rates(self, label: int) -> np.ndarray:
        rates = np.full(self.registry.total_features, self.background_rate)
        own = self.benign_idx if label == Label.BENIGN else self.malware_idx
        other = self.malware_idx if label == Label.BENIGN else self.benign_idx
        rates[own] = self.signal_strength
        rates[other] = 1.0 - self.signal_strength
        return rates

    def sample_bits(self, label: int, count: int, rng: np.random.Generator):
        rates = self.firing_rates(label)
        return (rng.random((count, self.registry.total_features)) < rates).astype(
            np.float64
        )


def _seed_int(seed) -> int:
    return int(seed) & 0xFFFFFFFF


def assign_splits(n: int, rng: np.random.Generator) -> np.ndarray:
    """80:10:10 split tags, shuffled."""
    n_val = n // 10
    n_test = n // 10
    tags = np.full(n, Split.TRAIN, dtype=np.uint8)
    tags[:n_val] = Split.VAL
    tags[n_val : n_val + n_test] = Split.TEST
    return tags[rng.permutation(n)]


def synth_generate(
    registry: TemplateRegistry,
    n_benign: int,
    n_malware: int,
    n_unlabeled: int,
    signal_strength: float,
    seed,
    planted_per_class: int = 16,
) -> Dataset:
    """Generate a labeled + unlabeled synthetic corpus, split 80:10:10.

    Deterministic under ``seed``.  Unlabeled samples are drawn half benign,
    half malware; their class is recorded only in the hidden ground-truth
    field.
    """
    if n_benign == 0 and n_malware == 0:
        raise ValueError("at least one labeled class must be non-empty")
    signal = ClassSignal.plant(registry, signal_strength, seed, planted_per_class)
    rng = np.random.default_rng([_seed_int(seed), 0x5A])

    blocks = []
    for label, count in ((Label.BENIGN, n_benign), (Label.MALWARE, n_malware)):
        if count == 0:
            continue
        bits = signal.sample_bits(label, count, rng)
        blocks.append(
            (
                bits,
                np.full(count, label, dtype=np.uint8),
                np.full(count, NO_TRUTH, dtype=np.uint8),
            )
        )
    if n_unlabeled:
        hidden = np.full(n_unlabeled, Label.MALWARE, dtype=np.uint8)
        hidden[: n_unlabeled // 2] = Label.BENIGN
        hidden = hidden[rng.permutation(n_unlabeled)]
        bits = np.empty((n_unlabeled, registry.total_features))
        for label in (Label.BENIGN, Label.MALWARE):
            mask = hidden == label
            bits[mask] = signal.sample_bits(label, int(mask.sum()), rng)
        blocks.append((bits, np.full(n_unlabeled, Label.UNLABELED, dtype=np.uint8), hidden))

    bits = np.concatenate([b for b, _, _ in blocks])
    labels = np.concatenate([l for _, l, _ in blocks])
    truths = np.concatenate([t for _, _, t in blocks])
    splits = np.concatenate([assign_splits(len(l), rng) for _, l, _ in blocks])
    prov = np.full(len(labels), Provenance.SYNTHETIC, dtype=np.uint8)
    return Dataset(registry, bits, labels, prov, splits, truths)


# ---------------------------------------------------------------------------
# File formats: binary ADFP and a JSON-lines twin
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    """Write the binary fingerprint file (little-endian ADFP, version 1).

    A hidden-truth trailer is appended only when some sample carries one, so
    files without it stay byte-identical under load/save round trips.
    """
    with open(path, "wb") as fh:
        fh.write(FILE_MAGIC)
        fh.write(struct.pack("<III", FILE_VERSION, ds.registry.total_features, len(ds.registry.templates)))
        for tpl in ds.registry.templates:
            name = tpl.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<II", tpl.start, tpl.end))
        fh.write(struct.pack("<I", len(ds)))
        row32 = np.empty(ds.registry.total_features, dtype="<f4")
        for i in range(len(ds)):
            fh.write(struct.pack("<BBB", ds.labels[i], ds.provenance[i], ds.splits[i]))
            row32[:] = ds.bits[i]
            fh.write(row32.tobytes())
        if (ds.true_labels != NO_TRUTH).any():
            fh.write(TRUTH_MAGIC)
            fh.write(struct.pack("<I", len(ds)))
            fh.write(ds.true_labels.astype(np.uint8).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated fingerprint file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def load_dataset(path) -> Dataset:
    """Read an ADFP file (with optional hidden-truth trailer)."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != FILE_MAGIC:
        raise FormatError("bad magic: not a fingerprint file")
    version, total_features, template_count = rd.unpack("<III")
    if version != FILE_VERSION:
        raise FormatError(f"unsupported fingerprint file version {version}")
    templates = []
    for _ in range(template_count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        start, end = rd.unpack("<II")
        templates.append(FeatureTemplate(name, start, end))
    try:
        registry = TemplateRegistry(tuple(templates), total_features)
    except ValueError as exc:
        raise FormatError(f"inconsistent template table: {exc}") from exc

    (sample_count,) = rd.unpack("<I")
    row_bytes = 3 + 4 * total_features
    if rd.remaining < sample_count * row_bytes:
        raise FormatError(
            "sample section shorter than header implies (feature-count mismatch?)"
        )
    labels = np.empty(sample_count, dtype=np.uint8)
    prov = np.empty(sample_count, dtype=np.uint8)
    splits = np.empty(sample_count, dtype=np.uint8)
    bits = np.empty((sample_count, total_features))
    for i in range(sample_count):
        labels[i], prov[i], splits[i] = rd.unpack("<BBB")
        if labels[i] > 2 or prov[i] > 2 or splits[i] > 2:
            raise FormatError(f"sample {i}: label/provenance/split byte out of range")
        row = np.frombuffer(rd.take(4 * total_features), dtype="<f4")
        bits[i] = row
    truths = np.full(sample_count, NO_TRUTH, dtype=np.uint8)
    if rd.remaining:
        if rd.take(4) != TRUTH_MAGIC:
            raise FormatError("unexpected trailing bytes after sample section")
        (count,) = rd.unpack("<I")
        if count != sample_count:
            raise FormatError("hidden-truth trailer count != sample count")
        truths = np.frombuffer(rd.take(count), dtype=np.uint8).copy()
        if rd.remaining:
            raise FormatError("trailing bytes after hidden-truth trailer")
    try:
        return Dataset(registry, bits, labels, prov, splits, truths)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_dataset_jsonl(ds: Dataset, path) -> None:
    """Write the JSON-lines twin: one header object, then one object per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "magic": FILE_MAGIC.decode(),
            "version": FILE_VERSION,
            "total_features": ds.registry.total_features,
            "templates": [
                {"name": t.name, "start": t.start, "end": t.end}
                for t in ds.registry.templates
            ],
            "sample_count": len(ds),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(len(ds)):
            row = {
                "label": int(ds.labels[i]),
                "provenance": int(ds.provenance[i]),
                "split": int(ds.splits[i]),
                "bits": [int(b) for b in ds.bits[i]],
            }
            if ds.true_labels[i] != NO_TRUTH:
                row["true_label"] = int(ds.true_labels[i])
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset_jsonl(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty fingerprint file")
    header = json.loads(lines[0])
    if header.get("magic") != FILE_MAGIC.decode():
        raise FormatError("bad magic: not a fingerprint JSONL file")
    if header.get("version") != FILE_VERSION:
        raise FormatError(f"unsupported version {header.get('version')}")
    try:
        registry = TemplateRegistry(
            tuple(
                FeatureTemplate(t["name"], t["start"], t["end"])
                for t in header["templates"]
            ),
            header["total_features"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"inconsistent template table: {exc}") from exc
    rows = lines[1:]
    if len(rows) != header.get("sample_count"):
        raise FormatError("sample_count does not match number of rows")
    n = len(rows)
    bits = np.empty((n, registry.total_features))
    labels = np.empty(n, dtype=np.uint8)
    prov = np.empty(n, dtype=np.uint8)
    splits = np.empty(n, dtype=np.uint8)
    truths = np.full(n, NO_TRUTH, dtype=np.uint8)
    for i, line in enumerate(rows):
        row = json.loads(line)
        vec = row["bits"]
        if len(vec) != registry.total_features:
            raise FormatError(
                f"sample {i}: row length {len(vec)} != total_features "
                f"{registry.total_features}"
            )
        bits[i] = vec
        labels[i] = row["label"]
        prov[i] = row["provenance"]
        splits[i] = row["split"]
        truths[i] = row.get("true_label", NO_TRUTH)
    try:
        return Dataset(registry, bits, labels, prov, splits, truths)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
