"""Central finite-difference gradients for checking the analytic passes."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-4,
                       indices=None) -> np.ndarray:
    """Estimate d f / d x by perturbing ``x`` in place.

    ``f`` takes no arguments and must read ``x`` (by reference) each call.
    ``indices`` restricts the estimate to a subset of flat positions; other
    entries are left as zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def check_layer(layer, x: np.ndarray, rng: np.random.Generator, eps: float = 1e-4, max_entries: int = 40,
                before_forward: Callable[[], None] | None = None) -> dict[str, float]:
    """Compare a layer's analytic gradients with central differences.

    The probe loss is ``sum(w * layer(x))`` for a fixed random ``w``. Both the
    input gradient and every parameter gradient are checked on up to
    ``max_entries`` randomly chosen positions. ``before_forward`` runs before
    every forward pass (e.g. to reseed dropout). Returns relative errors keyed
    by ``"input"`` and parameter name.
    """
    x = np.array(x, dtype=np.float64)
    layer.astype(np.float64)
    hook = before_forward or (lambda: None)
    hook()
    out = layer.forward(x, train=True)
    w = rng.standard_normal(out.shape)

    def loss():
        hook()
        return float(np.sum(w * layer.forward(x, train=True)))

    hook()
    layer.zero_grad()
    layer.forward(x, train=True)
    gx = layer.backward(w)
    analytic = {"input": gx}
    analytic.update({name: layer.grads[name].copy() for name in layer.params})
    targets = {"input": x}
    targets.update(layer.params)
    errors = {}
    for name, arr in targets.items():
        k = min(max_entries, arr.size)
        idx = rng.choice(arr.size, size=k, replace=False)
        num = numerical_gradient(loss, arr, eps, indices=idx)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], num.reshape(-1)[idx])
    return errors
