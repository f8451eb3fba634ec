"""Layers with explicit forward/backward passes over NumPy arrays.

Every layer keeps the activations it needs for ``backward`` only when the
forward pass ran in train mode. Eval-mode forwards never touch parameters or
running statistics, so they can be repeated (and run from several threads)
without side effects.

Arrays are ``(batch, features)`` for dense-style layers and
``(batch, channels, height, width)`` for spatial layers.
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an input does not match what a layer expects."""


class BackwardError(RuntimeError):
    """Raised when ``backward`` runs without a cached train-mode forward."""


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise BackwardError(f"{self.kind}: backward called without a cached train-mode forward")
        cache, self._cache = self._cache, None
        return cache

    def zero_grad(self) -> None:
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def astype(self, dtype) -> "Layer":
        for store in (self.params, self.buffers):
            for name in store:
                store[name] = store[name].astype(dtype)
        self.zero_grad()
        return self

    def describe(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.describe().items() if k != "kind")
        return f"{type(self).__name__}({args})"


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        if in_features < 1 or out_features < 1:
            raise ValueError("dense layer needs positive in/out features")
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = kaiming_uniform(rng, (out_features, in_features), in_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects (batch, {self.in_features}), got {x.shape}")
        self._cache = x if train else None
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        x = self._take_cache()
        self.grads["weight"] += grad.T @ x
        self.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params["weight"]

    def describe(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}


class Conv2d(Layer):
    """2-D convolution via a strided window view and one matmul."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.params["weight"] = kaiming_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv2d expects (batch, {self.in_channels}, h, w), got {x.shape}")
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = self.output_size(x.shape[2], x.shape[3])
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d input {x.shape[2:]} too small for kernel {k}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        # (B, C, Ho, Wo, k, k) -> (B*Ho*Wo, C*k*k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(x.shape[0] * ho * wo, -1)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.params["bias"]
        out = out.reshape(x.shape[0], ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        self._cache = (cols, x.shape) if train else None
        return np.ascontiguousarray(out)

    def backward(self, grad):
        cols, xshape = self._take_cache()
        b, c, h, w = xshape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = grad.shape[2], grad.shape[3]
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        self.grads["weight"] += (g2.T @ cols).reshape(self.params["weight"].shape)
        self.grads["bias"] += g2.sum(axis=0)
        dcols = (g2 @ wmat).reshape(b, ho, wo, c, k, k)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p : p + h, p : p + w] if p else dxp

    def describe(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride, "padding": self.padding}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask if train else None
        return x * mask

    def backward(self, grad):
        return grad * self._take_cache()


class Dropout(Layer):
    """Inverted dropout. Eval mode is the identity, including for gradients."""

    kind = "dropout"

    def __init__(self, rate: float = 0.5, seed: int = 0):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(seed)

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._cache = 1.0
            return x
        mask = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / x.dtype.type(1.0 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._take_cache()

    def describe(self):
        return {"kind": self.kind, "rate": self.rate}


class BatchNorm1d(Layer):
    kind = "batchnorm1d"

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(num_features, dtype=dtype)
        self.params["beta"] = np.zeros(num_features, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(num_features, dtype=dtype)
        self.buffers["running_var"] = np.ones(num_features, dtype=dtype)
        self.zero_grad()

    def normalize(self, x):
        """Pre-affine normalized activations using batch statistics."""
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        return (x - mean) / np.sqrt(var + self.eps)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise ShapeError(f"batchnorm1d expects (batch, {self.num_features}), got {x.shape}")
        if not train:
            self._cache = None
            xhat = (x - self.buffers["running_mean"]) / np.sqrt(self.buffers["running_var"] + self.eps)
            return self.params["gamma"] * xhat + self.params["beta"]
        if x.shape[0] < 2:
            raise ShapeError("batchnorm1d needs at least 2 samples per batch in train mode")
        n = x.shape[0]
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        m = self.momentum
        self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean).astype(x.dtype)
        self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * var * n / (n - 1)).astype(x.dtype)
        self._cache = (xhat, inv_std)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, grad):
        xhat, inv_std = self._take_cache()
        self.grads["gamma"] += (grad * xhat).sum(axis=0)
        self.grads["beta"] += grad.sum(axis=0)
        dxhat = grad * self.params["gamma"]
        return inv_std * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))

    def describe(self):
        return {"kind": self.kind, "num_features": self.num_features, "momentum": self.momentum, "eps": self.eps}


def bin_edges(size: int, bins: int) -> list[tuple[int, int]]:
    """Contiguous regions covering ``range(size)`` using floor/ceil boundaries."""
    return [((i * size) // bins, -((-(i + 1) * size) // bins)) for i in range(bins)]


def adaptive_avg_pool(x: np.ndarray, bins: tuple[int, int]) -> np.ndarray:
    """Average-pool the last two axes of ``x`` into a ``bins`` grid."""
    bh, bw = bins
    if bh < 1 or bw < 1:
        raise ValueError(f"adaptive pooling needs at least one bin per axis, got {bins}")
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError(f"adaptive pooling needs a non-empty map, got {x.shape}")
    out = np.empty(x.shape[:-2] + (bh, bw), dtype=x.dtype)
    for i, (r0, r1) in enumerate(bin_edges(h, bh)):
        for j, (c0, c1) in enumerate(bin_edges(w, bw)):
            out[..., i, j] = x[..., r0:r1, c0:c1].mean(axis=(-2, -1))
    return out


def adaptive_avg_pool_backward(grad: np.ndarray, in_hw: tuple[int, int]) -> np.ndarray:
    h, w = in_hw
    bh, bw = grad.shape[-2:]
    dx = np.zeros(grad.shape[:-2] + (h, w), dtype=grad.dtype)
    for i, (r0, r1) in enumerate(bin_edges(h, bh)):
        for j, (c0, c1) in enumerate(bin_edges(w, bw)):
            area = (r1 - r0) * (c1 - c0)
            dx[..., r0:r1, c0:c1] += (grad[..., i, j] / area)[..., None, None]
    return dx


class AdaptiveAvgPool2d(Layer):
    kind = "adaptive-avg-pool"

    def __init__(self, bins: tuple[int, int]):
        super().__init__()
        self.bins = tuple(bins)
        if min(self.bins) < 1:
            raise ValueError(f"adaptive pooling needs at least one bin per axis, got {bins}")

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError(f"adaptive-avg-pool expects (batch, c, h, w), got {x.shape}")
        self._cache = x.shape[2:] if train else None
        return adaptive_avg_pool(x, self.bins)

    def backward(self, grad):
        return adaptive_avg_pool_backward(grad, self._take_cache())

    def describe(self):
        return {"kind": self.kind, "bins": list(self.bins)}


class SpatialPyramidPool(Layer):
    """Pools a feature map over ``level x level`` grids and concatenates.

    The output row for one sample is ``sum(level**2)`` pooled vectors of
    ``channels`` values each, laid out vector by vector.
    """

    kind = "spp"

    def __init__(self, levels=(4, 2, 1)):
        super().__init__()
        levels = [int(v) for v in levels]
        if not levels or min(levels) < 1:
            raise ValueError(f"pyramid levels must be non-empty and >= 1, got {levels}")
        self.levels = levels

    @property
    def num_vectors(self) -> int:
        return sum(v * v for v in self.levels)

    def pooled_vectors(self, x: np.ndarray) -> np.ndarray:
        """Return ``(batch, num_vectors, channels)``."""
        parts = []
        for lv in self.levels:
            pooled = adaptive_avg_pool(x, (lv, lv))
            parts.append(pooled.reshape(x.shape[0], x.shape[1], lv * lv).transpose(0, 2, 1))
        return np.concatenate(parts, axis=1)

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError(f"spp expects (batch, c, h, w), got {x.shape}")
        self._cache = x.shape if train else None
        return self.pooled_vectors(x).reshape(x.shape[0], -1)

    def backward(self, grad):
        b, c, h, w = self._take_cache()
        vec = grad.reshape(b, self.num_vectors, c)
        dx = np.zeros((b, c, h, w), dtype=grad.dtype)
        start = 0
        for lv in self.levels:
            part = vec[:, start : start + lv * lv].transpose(0, 2, 1).reshape(b, c, lv, lv)
            dx += adaptive_avg_pool_backward(part, (h, w))
            start += lv * lv
        return dx

    def describe(self):
        return {"kind": self.kind, "levels": list(self.levels)}


class GradReverse(Layer):
    """Identity on the way forward; multiplies gradients by ``-scale`` on the way back."""

    kind = "grl"

    def __init__(self, scale: float = 1.0):
        super().__init__()
        if scale < 0:
            raise ValueError("gradient reversal scale must be non-negative")
        self.scale = float(scale)

    def forward(self, x, train=False):
        self._cache = True if train else None
        return x

    def backward(self, grad):
        self._take_cache()
        return -self.scale * grad

    def describe(self):
        return {"kind": self.kind, "scale": self.scale}


_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, Dropout, BatchNorm1d, AdaptiveAvgPool2d,
                                    SpatialPyramidPool, GradReverse)}


def layer_from_description(desc: dict, rng: np.random.Generator | None = None) -> Layer:
    desc = dict(desc)
    kind = desc.pop("kind")
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    if cls in (Dense, Conv2d):
        return cls(rng=rng, **desc)
    if cls is AdaptiveAvgPool2d:
        return cls(tuple(desc["bins"]))
    return cls(**desc)
