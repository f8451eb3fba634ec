"""SGD (with momentum) and Adam over ``(layer, name)`` parameter references."""

from __future__ import annotations

import numpy as np


def _check_finite(grad, name):
    if not np.isfinite(grad).all():
        raise FloatingPointError(f"non-finite gradient for parameter {name}")


class Optimizer:
    def __init__(self, params, lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr

    def zero_grad(self):
        for layer, name in self.params:
            layer.grads[name][...] = 0

    def step(self):
        for i, (layer, name) in enumerate(self.params):
            g = layer.grads[name]
            _check_finite(g, f"{layer.kind}.{name}")
            self._update(i, layer.params[name], g)

    def _update(self, key, p, g):
        raise NotImplementedError


class SGD(Optimizer):
    """``v <- momentum * v + g``; ``p <- p - lr * v``."""

    def __init__(self, params, lr: float = 1e-3, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr)
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[int, np.ndarray] = {}

    def _update(self, key, p, g):
        if self.weight_decay:
            g = g + self.weight_decay * p
        if self.momentum:
            v = self.velocity.get(key)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[key] = v
            g = v
        p -= (self.lr * g).astype(p.dtype)


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def step(self):
        self.t += 1
        super().step()

    def _update(self, key, p, g):
        if self.weight_decay:
            g = g + self.weight_decay * p
        m = self.m.get(key, np.zeros_like(p, dtype=np.float64))
        v = self.v.get(key, np.zeros_like(p, dtype=np.float64))
        m = self.b1 * m + (1 - self.b1) * g
        v = self.b2 * v + (1 - self.b2) * g * g
        self.m[key], self.v[key] = m, v
        mhat = m / (1 - self.b1 ** self.t)
        vhat = v / (1 - self.b2 ** self.t)
        p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> Optimizer:
    if name == "sgd":
        return SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if name == "adam":
        return Adam(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float, momentum: float = 0.0,
             velocity: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Functional SGD update on bare arrays. Returns the new velocities."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    velocity = velocity if velocity is not None else [None] * len(params)
    new_velocity = []
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: shape {p.shape} != gradient shape {g.shape}")
        _check_finite(g, str(i))
        v = g.copy() if v is None or not momentum else momentum * v + g
        p -= lr * v
        new_velocity.append(v)
    return new_velocity
