"""Ordered layer stacks."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .layers import BackwardError, Layer, ShapeError, layer_from_description


class Sequential:
    def __init__(self, layers: list[Layer] | None = None):
        self.layers: list[Layer] = list(layers or [])

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, idx):
        return self.layers[idx]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, train=train)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            if not np.isfinite(x).all():
                raise FloatingPointError(f"layer {i} ({layer.kind}) produced non-finite activations")
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            try:
                grad = layer.backward(grad)
            except BackwardError as exc:
                raise BackwardError(f"layer {i}: {exc}") from None
            if not np.isfinite(grad).all():
                raise FloatingPointError(f"layer {i} ({layer.kind}) produced non-finite gradients")
        return grad

    __call__ = forward

    def parameters(self) -> Iterator[tuple[Layer, str]]:
        for layer in self.layers:
            for name in layer.params:
                yield layer, name

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def astype(self, dtype) -> "Sequential":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    @classmethod
    def from_description(cls, desc: list[dict], rng: np.random.Generator | None = None) -> "Sequential":
        return cls([layer_from_description(d, rng) for d in desc])

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name, arr in store.items():
                    state[f"{i}.{name}"] = arr
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for key, arr in state.items():
            idx, name = key.split(".", 1)
            layer = self.layers[int(idx)]
            store = layer.params if name in layer.params else layer.buffers
            if name not in store:
                raise KeyError(f"layer {idx} ({layer.kind}) has no tensor {name!r}")
            if store[name].shape != arr.shape:
                raise ShapeError(f"layer {idx} {name}: shape {arr.shape} != {store[name].shape}")
            store[name] = np.array(arr, dtype=store[name].dtype, copy=True)
        for layer in self.layers:
            layer.zero_grad()


def forward(network: Sequential, x: np.ndarray, mode: str = "eval") -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return network.forward(x, train=mode == "train")


def backward(network: Sequential, upstream_grad: np.ndarray) -> np.ndarray:
    return network.backward(upstream_grad)


def params_digest(*networks) -> str:
    """SHA-256 over every parameter of the given networks/layers, in order."""
    h = hashlib.sha256()
    for net in networks:
        layers = net.layers if isinstance(net, Sequential) else [net]
        for layer in layers:
            for name in sorted(layer.params):
                h.update(name.encode())
                h.update(np.ascontiguousarray(layer.params[name]).tobytes())
    return h.hexdigest()
