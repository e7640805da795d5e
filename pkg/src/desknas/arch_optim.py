"""Architecture-parameter optimizers: exponentiated gradient on the simplex, plain
logit descent, the delayed-start gate, and the entropy convergence indicator."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

THETA_FLOOR = 1e-12


def gaea_step(theta_row: np.ndarray, grad_row: np.ndarray, eta: float) -> np.ndarray:
    """Multiplicative update ``theta * exp(-eta * grad)`` followed by renormalization."""
    if eta <= 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    theta_row = np.asarray(theta_row, dtype=np.float64)
    if not np.any(theta_row > 0):
        raise ValueError("theta row has no positive entry; cannot renormalize")
    # subtracting the max exponent keeps exp() finite and cancels in the normalization
    z = -eta * np.asarray(grad_row, dtype=np.float64)
    updated = theta_row * np.exp(z - z.max())
    updated = np.where(theta_row > 0, np.maximum(updated, THETA_FLOOR), 0.0)
    return updated / updated.sum()


def gaea_step_groups(theta: np.ndarray, grad: np.ndarray, eta: float, groups: list[list[int]]) -> np.ndarray:
    """Apply :func:`gaea_step` independently to each index group of a flat vector."""
    out = np.array(theta, dtype=np.float64)
    for g in groups:
        out[g] = gaea_step(out[g], grad[g], eta)
    return out


def softmax_alpha_step(alpha_row: np.ndarray, grad_row: np.ndarray, lr: float) -> np.ndarray:
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    return np.asarray(alpha_row, dtype=np.float64) - lr * np.asarray(grad_row, dtype=np.float64)


def entropy(row: np.ndarray) -> float:
    p = np.asarray(row, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum()) + 0.0


def arch_update_gate(epoch: int, start_epoch: int) -> bool:
    return epoch >= start_epoch


@dataclass
class GaeaState:
    theta: np.ndarray
    eta: float = 0.1
    step: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.ndim == 1:
            self.theta = self.theta[None]
        if np.any(self.theta < 0) or np.any(np.abs(self.theta.sum(axis=1) - 1) > 1e-9):
            raise ValueError("every theta row must lie on the probability simplex")

    def update(self, grad: np.ndarray) -> "GaeaState":
        grad = np.asarray(grad, dtype=np.float64).reshape(self.theta.shape)
        self.theta = np.stack([gaea_step(r, g, self.eta) for r, g in zip(self.theta, grad)])
        self.step += 1
        return self


@dataclass
class EntropyTrace:
    """Per-epoch op-distribution entropies of every cell edge."""

    rows: list[tuple[int, str, float]] = field(default_factory=list)

    def record(self, epoch: int, distributions: dict[str, np.ndarray]) -> None:
        for edge_id, p in distributions.items():
            self.rows.append((epoch, edge_id, entropy(p)))

    def epochs(self) -> list[int]:
        return sorted({e for e, _, _ in self.rows})

    def summary(self) -> list[tuple[int, float, float, float]]:
        out = []
        for ep in self.epochs():
            vals = np.array([h for e, _, h in self.rows if e == ep])
            out.append((ep, float(vals.mean()), float(vals.min()), float(vals.max())))
        return out

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_entropy", "min_entropy", "max_entropy"])
            for row in self.summary():
                w.writerow([row[0], *(f"{v:.10g}" for v in row[1:])])


def read_entropy_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) if k != "epoch" else int(v) for k, v in row.items()} for row in csv.DictReader(fh)]


class ArchOptimizer:
    """Update rule for all architecture tensors of an :class:`~desknas.supernet.ArchParams`.

    With ``theta_mode`` every simplex group (alpha rows, gamma per block, beta
    per node) gets an exponentiated-gradient step; otherwise logits get a
    plain gradient step. Gamma and beta always follow the alpha optimizer.
    """

    def __init__(self, arch, lr: float = 0.1):
        self.arch = arch
        self.lr = lr

    def step(self) -> None:
        arch = self.arch
        for ct in arch.alpha:
            self._update(arch.alpha[ct], None)
            self._update(arch.gamma[ct], arch.cell_groups)
        self._update(arch.beta, arch.net_groups)

    def _update(self, tensor, groups) -> None:
        if tensor.grad is None or tensor.data.size == 0:
            return
        grad = tensor.grad.astype(np.float64)
        data = tensor.data.astype(np.float64)
        if not self.arch.theta_mode:
            new = softmax_alpha_step(data, grad, self.lr)
        elif groups is None:
            new = np.stack([gaea_step(r, g, self.lr) for r, g in zip(data, grad)])
        else:
            new = gaea_step_groups(data, grad, self.lr, groups)
        tensor.data = new.astype(tensor.dtype)

    def zero_grad(self) -> None:
        for t in self.arch.parameters():
            t.grad = None
