"""Layer implementations with explicit forward/backward passes.

Conventions: batch-first float64 arrays, NHWC layout for spatial tensors.
Each layer caches what its backward pass needs when ``forward`` is called
with ``cache=True``; parametric layers expose ``params`` (list of arrays)
and fill the parallel ``grads`` list during ``backward``.
"""

from __future__ import annotations

import math

import numpy as np

# Sigmoid outputs are clipped into the open interval so probabilities never
# saturate to exactly 0 or 1 and cross-entropy stays finite.
_PROB_EPS = 1e-12


class Layer:
    trainable = True

    @property
    def params(self) -> list[np.ndarray]:
        return []

    @property
    def grads(self) -> list[np.ndarray]:
        return []

    def forward(self, x: np.ndarray, cache: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def describe(self) -> str:
        return type(self).__name__.lower()

    def clone(self) -> "Layer":
        raise NotImplementedError


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Dense(Layer):
    def __init__(self, in_width: int, units: int, rng: np.random.Generator):
        self.w = glorot_uniform(rng, (in_width, units), in_width, units)
        self.b = np.zeros(units)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.trainable = True
        self._x = None

    @property
    def params(self):
        return [self.w, self.b]

    @property
    def grads(self):
        return [self.gw, self.gb]

    def forward(self, x, cache=False):
        if x.ndim != 2 or x.shape[1] != self.w.shape[0]:
            raise ValueError(
                f"dense expects (batch, {self.w.shape[0]}) input, got {x.shape}"
            )
        if cache:
            self._x = x
        return x @ self.w + self.b

    def backward(self, grad):
        self.gw = self._x.T @ grad
        self.gb = grad.sum(axis=0)
        return grad @ self.w.T

    def output_shape(self, in_shape):
        return (self.w.shape[1],)

    def describe(self):
        return f"dense({self.w.shape[0]}->{self.w.shape[1]})"

    def clone(self):
        dup = Dense.__new__(Dense)
        dup.w = self.w.copy()
        dup.b = self.b.copy()
        dup.gw = np.zeros_like(dup.w)
        dup.gb = np.zeros_like(dup.b)
        dup.trainable = self.trainable
        dup._x = None
        return dup


class Conv2d(Layer):
    """3x3 convolution with 'same' zero padding (spatial dims preserved)."""

    def __init__(self, in_channels: int, filters: int, rng: np.random.Generator):
        fan_in = 9 * in_channels
        fan_out = 9 * filters
        self.w = glorot_uniform(rng, (3, 3, in_channels, filters), fan_in, fan_out)
        self.b = np.zeros(filters)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.trainable = True
        self._padded = None

    @property
    def params(self):
        return [self.w, self.b]

    @property
    def grads(self):
        return [self.gw, self.gb]

    def forward(self, x, cache=False):
        if x.ndim != 4 or x.shape[3] != self.w.shape[2]:
            raise ValueError(
                f"conv2d expects (batch, H, W, {self.w.shape[2]}) input, got {x.shape}"
            )
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        if cache:
            self._padded = padded
        # windows: (batch, H, W, C, 3, 3)
        windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
        out = np.tensordot(windows, self.w, axes=([4, 5, 3], [0, 1, 2]))
        return out + self.b

    def backward(self, grad):
        padded = self._padded
        batch, ph, pw, _ = padded.shape
        h, w = ph - 2, pw - 2
        windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
        # gw over (batch, H, W) -> (C, 3, 3, F), then to kernel layout
        gw = np.tensordot(windows, grad, axes=([0, 1, 2], [0, 1, 2]))
        self.gw = gw.transpose(1, 2, 0, 3)
        self.gb = grad.sum(axis=(0, 1, 2))
        gpad = np.zeros_like(padded)
        for di in range(3):
            for dj in range(3):
                gpad[:, di : di + h, dj : dj + w, :] += grad @ self.w[di, dj].T
        return gpad[:, 1 : 1 + h, 1 : 1 + w, :]

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        return (h, w, self.w.shape[3])

    def describe(self):
        return f"conv2d({self.w.shape[2]}->{self.w.shape[3]}, 3x3 same)"

    def clone(self):
        dup = Conv2d.__new__(Conv2d)
        dup.w = self.w.copy()
        dup.b = self.b.copy()
        dup.gw = np.zeros_like(dup.w)
        dup.gb = np.zeros_like(dup.b)
        dup.trainable = self.trainable
        dup._padded = None
        return dup


class MaxPool(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    trainable = False

    def __init__(self):
        self._in_shape = None
        self._argmax = None

    def forward(self, x, cache=False):
        batch, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        if h2 == 0 or w2 == 0:
            raise ValueError(f"maxpool input too small: {x.shape}")
        win = x[:, : h2 * 2, : w2 * 2, :].reshape(batch, h2, 2, w2, 2, c)
        win = win.transpose(0, 1, 3, 5, 2, 4).reshape(batch, h2, w2, c, 4)
        if cache:
            self._in_shape = x.shape
            self._argmax = win.argmax(axis=-1)
        return win.max(axis=-1)

    def backward(self, grad):
        batch, h, w, c = self._in_shape
        h2, w2 = h // 2, w // 2
        scatter = np.zeros((batch, h2, w2, c, 4))
        np.put_along_axis(scatter, self._argmax[..., None], grad[..., None], axis=-1)
        scatter = scatter.reshape(batch, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        gx = np.zeros(self._in_shape)
        gx[:, : h2 * 2, : w2 * 2, :] = scatter.reshape(batch, h2 * 2, w2 * 2, c)
        return gx

    def output_shape(self, in_shape):
        h, w, c = in_shape
        return (h // 2, w // 2, c)

    def describe(self):
        return "maxpool(2x2)"

    def clone(self):
        return MaxPool()


class GlobalAvgPool(Layer):
    trainable = False

    def __init__(self):
        self._in_shape = None

    def forward(self, x, cache=False):
        if cache:
            self._in_shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        _, h, w, _ = self._in_shape
        return np.broadcast_to(
            grad[:, None, None, :] / (h * w), self._in_shape
        ).copy()

    def output_shape(self, in_shape):
        return (in_shape[2],)

    def describe(self):
        return "global_avg_pool"

    def clone(self):
        return GlobalAvgPool()


class Activation(Layer):
    trainable = False

    def __init__(self, kind: str):
        if kind not in ("relu", "tanh", "sigmoid"):
            raise ValueError(f"unknown activation: {kind!r}")
        self.kind = kind
        self._cache = None

    def forward(self, x, cache=False):
        if self.kind == "relu":
            out = np.maximum(x, 0.0)
            if cache:
                self._cache = x > 0.0
        elif self.kind == "tanh":
            out = np.tanh(x)
            if cache:
                self._cache = out
        else:
            out = np.clip(_sigmoid(x), _PROB_EPS, 1.0 - _PROB_EPS)
            if cache:
                self._cache = out
        return out

    def backward(self, grad):
        if self.kind == "relu":
            return grad * self._cache
        if self.kind == "tanh":
            return grad * (1.0 - self._cache**2)
        return grad * self._cache * (1.0 - self._cache)

    def output_shape(self, in_shape):
        return in_shape

    def describe(self):
        return self.kind

    def clone(self):
        return Activation(self.kind)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Flatten(Layer):
    trainable = False

    def __init__(self):
        self._in_shape = None

    def forward(self, x, cache=False):
        if cache:
            self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._in_shape)

    def output_shape(self, in_shape):
        n = 1
        for d in in_shape:
            n *= d
        return (n,)

    def describe(self):
        return "flatten"

    def clone(self):
        return Flatten()


class GridReshape(Layer):
    """Zero-pad a flat feature vector to H*W and lay it out as (H, W, 1)."""

    trainable = False

    def __init__(self, in_width: int, side: int):
        if side * side < in_width:
            raise ValueError(f"{side}x{side} grid cannot hold {in_width} features")
        self.in_width = in_width
        self.side = side

    def forward(self, x, cache=False):
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ValueError(
                f"grid reshape expects (batch, {self.in_width}) input, got {x.shape}"
            )
        batch = x.shape[0]
        padded = np.zeros((batch, self.side * self.side))
        padded[:, : self.in_width] = x
        return padded.reshape(batch, self.side, self.side, 1)

    def backward(self, grad):
        flat = grad.reshape(grad.shape[0], self.side * self.side)
        return flat[:, : self.in_width]

    def output_shape(self, in_shape):
        return (self.side, self.side, 1)

    def describe(self):
        return f"reshape({self.side}x{self.side}x1)"

    def clone(self):
        return GridReshape(self.in_width, self.side)
