"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_layer(layer, x: np.ndarray, train: bool = True, seed: int = 0, eps: float = 1e-4) -> dict[str, float]:
    """Relative error of analytic vs numerical gradients for input and parameters.

    Uses the scalar objective ``sum(layer(x) * R)`` with fixed random ``R``.
    Running statistics of batchnorm layers are restored around every probe.
    """
    rng = np.random.default_rng(seed)
    out = layer.forward(x, train)
    r = rng.standard_normal(out.shape)
    snapshot = _buffers(layer)

    def objective():
        value = float((layer.forward(x, train) * r).sum())
        _restore(layer, snapshot)
        return value

    _restore(layer, snapshot)
    layer.zero_grad()
    layer.forward(x, train)
    _restore(layer, snapshot)
    dx = layer.backward(r)
    analytic = {"input": dx}
    for name, holder, key in _params(layer):
        analytic[name] = holder.grads[key].copy()

    errors = {"input": rel_error(analytic["input"], numerical_grad(objective, x, eps))}
    for name, holder, key in _params(layer):
        errors[name] = rel_error(analytic[name], numerical_grad(objective, holder.params[key], eps))
    return errors


def _params(layer):
    if hasattr(layer, "named_layers"):
        for lname, sub in layer.named_layers():
            for key in sub.params:
                yield f"{lname}.{key}", sub, key
    else:
        for key in getattr(layer, "params", {}):
            yield key, layer, key


def _buffers(layer):
    subs = [s for _, s in layer.named_layers()] if hasattr(layer, "named_layers") else [layer]
    return [(s, s.running_mean.copy(), s.running_var.copy()) for s in subs if hasattr(s, "running_mean")]


def _restore(layer, snapshot):
    for s, mean, var in snapshot:
        s.running_mean = mean.copy()
        s.running_var = var.copy()
