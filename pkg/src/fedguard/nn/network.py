"""Layered network with a base/head boundary marker."""

from __future__ import annotations

import hashlib

import numpy as np

from fedguard.nn.layers import Layer


class Network:
    """An ordered stack of layers ending in a 2-unit sigmoid output.

    ``base_boundary`` is the layer index where the transfer-learning head
    begins: layers ``[0, base_boundary)`` form the base.
    """

    def __init__(self, name: str, layers: list[Layer], base_boundary: int = 0):
        if not 0 <= base_boundary <= len(layers):
            raise ValueError("base_boundary out of range")
        self.name = name
        self.layers = layers
        self.base_boundary = base_boundary

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Inference pass; returns per-sample [p_benign, p_malware]."""
        x = np.asarray(x, dtype=np.float64)
        if not np.isfinite(x).all():
            raise ValueError("non-finite network input")
        for layer in self.layers:
            x = layer.forward(x, cache=False)
        return x

    def forward_training(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, cache=True)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    # -- parameter access ---------------------------------------------------

    def param_arrays(self, trainable_only: bool = False) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            if trainable_only and not layer.trainable:
                continue
            out.extend(layer.params)
        return out

    def grad_arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            if layer.params:
                out.extend(layer.grads)
        return out

    def param_count(self, trainable_only: bool = False) -> int:
        return sum(a.size for a in self.param_arrays(trainable_only))

    def weight_vector(self) -> np.ndarray:
        """Concatenation of all trainable weight tensors, flattened."""
        arrays = self.param_arrays(trainable_only=True)
        if not arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in arrays])

    def load_weight_vector(self, vec: np.ndarray) -> None:
        """Write a flat vector back into the trainable weight tensors."""
        vec = np.asarray(vec, dtype=np.float64)
        arrays = self.param_arrays(trainable_only=True)
        expected = sum(a.size for a in arrays)
        if vec.shape != (expected,):
            raise ValueError(
                f"weight vector length {vec.shape} != trainable parameter count {expected}"
            )
        pos = 0
        for arr in arrays:
            arr[...] = vec[pos : pos + arr.size].reshape(arr.shape)
            pos += arr.size

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.param_arrays())

    # -- structure ----------------------------------------------------------

    def output_shape(self, in_shape: tuple) -> tuple:
        shape = in_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def describe(self) -> list[str]:
        return [layer.describe() for layer in self.layers]

    def base_layers(self) -> list[Layer]:
        return self.layers[: self.base_boundary]

    def head_layers(self) -> list[Layer]:
        return self.layers[self.base_boundary :]

    def clone(self) -> "Network":
        return Network(self.name, [l.clone() for l in self.layers], self.base_boundary)

    def weights_hash(self) -> str:
        """SHA-256 over all parameter buffers (frozen-base integrity checks)."""
        digest = hashlib.sha256()
        for arr in self.param_arrays():
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()

    def snap_to_f32(self) -> None:
        """Round every parameter to its nearest float32 value.

        Applied to checkpoint snapshots so that saving (f32 storage) and
        reloading reproduces the snapshot bitwise.
        """
        for arr in self.param_arrays():
            arr[...] = arr.astype(np.float32).astype(np.float64)
