"""Static report figures (PNG) written with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_entropy(rows: Sequence[dict], path, alpha_start: int | None = None) -> Path:
    """Mean op-distribution entropy per search epoch with its min/max band."""
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.fill_between(epochs, [r["min_entropy"] for r in rows], [r["max_entropy"] for r in rows],
                    alpha=0.25, label="min / max")
    ax.plot(epochs, [r["mean_entropy"] for r in rows], marker="o", ms=3, label="mean")
    if alpha_start is not None and epochs and alpha_start <= max(epochs):
        ax.axvline(alpha_start, color="grey", ls="--", lw=1, label="arch updates start")
    ax.set_xlabel("epoch")
    ax.set_ylabel("entropy (nats)")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_pr_curve(rows: Sequence[dict], path, label: str = "decoded network") -> Path:
    """Object-level precision and recall against the matching IoU threshold."""
    t = [r["threshold"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(t, [r["precision"] for r in rows], marker="o", ms=3, label=f"precision ({label})")
    ax.plot(t, [r["recall"] for r in rows], marker="s", ms=3, label=f"recall ({label})")
    ax.set_xlabel("IoU threshold")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_training(rows: Sequence[dict], path, title: str = "") -> Path:
    """Loss and validation MeanIoU per epoch on twin axes."""
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [float(r["loss"]) for r in rows], color="tab:red", marker="o", ms=3, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="tab:red")
    ax2 = ax.twinx()
    ax2.plot(epochs, [float(r["valid_miou"]) for r in rows], color="tab:blue", marker="s", ms=3, ls="--",
             label="valid MeanIoU")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax2.set_ylabel("valid MeanIoU", color="tab:blue")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_random_baseline(samples: Sequence[float], path, searched: float | None = None) -> Path:
    """Per-sample MeanIoU of random cells beside the searched cell."""
    labels = [f"random {i}" for i in range(len(samples))]
    values = list(samples)
    colors = ["tab:grey"] * len(samples)
    if searched is not None:
        labels.append("searched")
        values.append(searched)
        colors.append("tab:orange")
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(values) + 1), 3.2))
    ax.bar(range(len(values)), values, color=colors)
    if samples:
        ax.axhline(max(samples), color="k", ls=":", lw=1, label="best random")
        ax.legend(fontsize=8)
    ax.set_xticks(range(len(values)), labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("test MeanIoU")
    return _save(fig, path)


def plot_evolution(records: Sequence[dict], path) -> Path:
    """Fitness of every evaluated individual per generation and the running best."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ok = [r for r in records if r.get("fitness") is not None]
    ax.scatter([r["generation"] for r in ok], [r["fitness"] for r in ok], s=12, alpha=0.6, label="evaluated")
    gens = sorted({r["generation"] for r in records})
    best, run = [], float("-inf")
    for g in gens:
        run = max([run] + [r["fitness"] for r in ok if r["generation"] == g])
        best.append(run)
    ax.plot(gens, best, color="tab:orange", label="best so far")
    ax.set_xlabel("generation")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_ylabel("fitness (valid MeanIoU)")
    ax.legend(fontsize=8)
    return _save(fig, path)
