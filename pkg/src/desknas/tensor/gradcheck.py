"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d fn() / d tensor by central differences, perturbing ``tensor.data`` in place."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(fn().data)
        flat[i] = orig - eps
        minus = float(fn().data)
        flat[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error scaled by the larger gradient magnitude of the pair."""
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Return the worst relative error over ``tensors`` between backward and finite differences."""
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        worst = max(worst, relative_error(a, numerical_gradient(fn, t, eps)))
    return worst
