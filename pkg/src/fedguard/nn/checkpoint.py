"""Weight checkpoint file (binary ADWT) and metrics-history CSV export."""

from __future__ import annotations

import csv
import struct

import numpy as np

from fedguard.errors import FormatError
from fedguard.nn.network import Network
from fedguard.nn.training import EpochStats

CKPT_MAGIC = b"ADWT"
CKPT_VERSION = 1


def save_checkpoint(net: Network, path, name: str | None = None) -> None:
    """Write every parameter tensor of ``net`` as little-endian f32.

    ``name`` overrides the stored model name (callers embed JSON metadata
    there to make checkpoints self-describing).
    """
    save_tensors(name if name is not None else net.name, net.param_arrays(), path)


def save_tensors(name: str, tensors: list[np.ndarray], path) -> None:
    encoded = name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", len(tensors)))
        for arr in tensors:
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[str, list[np.ndarray]]:
    """Read an ADWT file; tensors come back as float64."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated checkpoint file")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError("bad magic: not a weight checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (name_len,) = struct.unpack("<H", take(2))
    name = take(name_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    tensors = []
    for _ in range(count):
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        raw = np.frombuffer(take(4 * size), dtype="<f4")
        tensors.append(raw.astype(np.float64).reshape(dims))
    if pos != len(data):
        raise FormatError("trailing bytes in checkpoint file")
    return name, tensors


def restore_into(net: Network, tensors: list[np.ndarray]) -> None:
    """Copy loaded tensors into an architecture-compatible network."""
    arrays = net.param_arrays()
    if len(arrays) != len(tensors):
        raise FormatError(
            f"checkpoint holds {len(tensors)} tensors, network has {len(arrays)}"
        )
    for arr, tensor in zip(arrays, tensors):
        if arr.shape != tensor.shape:
            raise FormatError(
                f"tensor shape {tensor.shape} does not match layer shape {arr.shape}"
            )
        arr[...] = tensor


def write_history_csv(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "loss", "val_loss", "accuracy", "val_accuracy", "f1", "val_f1"]
        )
        for row in history:
            writer.writerow(
                [
                    row.epoch,
                    row.train.loss,
                    row.val.loss,
                    row.train.accuracy,
                    row.val.accuracy,
                    row.train.f1,
                    row.val.f1,
                ]
            )
