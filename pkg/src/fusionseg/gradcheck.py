"""Central finite-difference checks for recorded operators."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Parameter, Tensor, backward


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """d fn / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) elementwise.

    The floor keeps entries that are zero up to roundoff from dominating.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], wrt: Sequence[Tensor],
                    eps: float = 1e-4) -> list[float]:
    """Compare recorded gradients of ``loss_fn()`` with finite differences.

    ``wrt`` holds leaf tensors (plain tensors get ``requires_grad`` set) or
    trainable parameters. Returns one max relative error per input.
    """
    for t in wrt:
        if isinstance(t, Parameter):
            t.zero_grad()
        else:
            t.requires_grad = True
            t.grad = None
    with Graph() as g:
        loss = loss_fn()
    backward(loss, g)
    analytic = [np.array(t.grad if t.grad is not None else np.zeros_like(t.data)) for t in wrt]
    errors = []
    for t, a in zip(wrt, analytic):
        num = numerical_grad(lambda: float(loss_fn().data), t.data, eps)
        errors.append(max_relative_error(a, num))
    return errors
