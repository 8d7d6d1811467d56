"""First-order updates for :class:`~fusionseg.tensor.Parameter` sets."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """value <- value - lr * grad for trainable params, then zero every gradient."""
    for p in params:
        if p.trainable and lr != 0.0:
            p.data -= lr * p.grad
        p.zero_grad()


def global_grad_norm(params: Iterable[Parameter]) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.trainable)))


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.trainable:
                p.grad *= factor
    return norm


class SGD:
    """SGD with optional heavy-ball momentum (momentum=0 is plain :func:`sgd_step`)."""

    def __init__(self, params: list[Parameter], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ValueError(f"lr must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params] if momentum else None

    def step(self) -> None:
        if not self.momentum:
            sgd_step(self.params, self.lr)
            return
        for p, v in zip(self.params, self._velocity):
            if p.trainable:
                v *= self.momentum
                v += p.grad
                p.data -= self.lr * v
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
