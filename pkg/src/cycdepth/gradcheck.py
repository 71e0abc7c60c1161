"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(fn: Callable[[], Tensor], arr: np.ndarray, h: float) -> np.ndarray:
    """d fn() / d arr by central differences, perturbing ``arr`` in place."""
    out = np.zeros(arr.shape, dtype=np.float64)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return out


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-2) -> float:
    """Max relative error between backprop and finite differences over ``inputs``.

    ``fn`` must rebuild the graph from the current ``.data`` of ``inputs`` on
    every call and return a scalar tensor.
    """
    for t in inputs:
        t.zero_grad()
    fn().backward()
    analytic = [t.grad.copy() for t in inputs]
    worst = 0.0
    for t, a in zip(inputs, analytic):
        num = numeric_grad(fn, t.data, h)
        worst = max(worst, float(rel_error(a, num).max()))
    return worst
