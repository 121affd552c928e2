"""Parameter update rules operating in place on lists of arrays."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float,
             momentum: float = 0.0, velocity: Sequence[np.ndarray] | None = None):
    """One momentum SGD step: ``v = momentum * v + g``; ``p -= lr * v``.

    ``velocity`` is updated in place when given; without it the step is plain
    SGD regardless of ``momentum``.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for i, (p, g) in enumerate(zip(params, grads)):
        if velocity is not None:
            v = velocity[i]
            v *= momentum
            v += g
            p -= lr * v
        else:
            p -= lr * g
    return params


class SGD:
    def __init__(self, params, lr=0.01, momentum=0.9):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        sgd_step(self.params, grads, self.lr, self.momentum, self.velocity)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params, lr: float):
    if name == "adam":
        return Adam(params, lr=lr)
    if name == "sgd":
        return SGD(params, lr=lr, momentum=0.9)
    raise ValueError(f"unknown optimizer {name!r}")
