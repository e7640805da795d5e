"""SGD with momentum for layer weights and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Tensor


@dataclass
class TrainState:
    tensors: list[Tensor]
    momentum: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    epoch: int = 0

    def __post_init__(self):
        if not self.momentum:
            self.momentum = [np.zeros_like(t.data) for t in self.tensors]
        for t, m in zip(self.tensors, self.momentum):
            if t.shape != m.shape:
                raise ValueError(f"momentum buffer {m.shape} does not mirror tensor {t.shape}")

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None


def sgd_momentum_step(state: TrainState, lr: float, momentum: float = 0.9,
                      weight_decay: float = 0.0, grads: list[np.ndarray] | None = None) -> TrainState:
    """In-place update ``v = momentum*v + (g + wd*w); w -= lr*v``.

    ``grads`` defaults to each tensor's ``.grad``; a missing gradient counts as zero.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if grads is None:
        grads = [t.grad for t in state.tensors]
    if len(grads) != len(state.tensors):
        raise ValueError(f"got {len(grads)} gradients for {len(state.tensors)} tensors")
    for t, v, g in zip(state.tensors, state.momentum, grads):
        if g is None:
            g = np.zeros_like(t.data)
        elif g.shape != t.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor {t.shape}")
        d = g + weight_decay * t.data if weight_decay else g
        v *= momentum
        v += d
        t.data -= (lr * v).astype(t.dtype, copy=False)
    state.step += 1
    return state


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    step = min(max(step, 0), total_steps)
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
