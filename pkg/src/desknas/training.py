"""Training loops: supernet search, discrete retraining, and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .arch_optim import ArchOptimizer, EntropyTrace, arch_update_gate
from .data import DatasetSplit
from .metrics import DEFAULT_THRESHOLDS, EvalReport, mean_iou, pr_curve, predict_mask, weighted_cross_entropy
from .supernet import SearchNetwork, SuperNet, supernet_forward
from .tensor.core import Tensor, no_grad
from .tensor.optim import TrainState, cosine_lr, sgd_momentum_step

log = logging.getLogger(__name__)


@dataclass
class TrainSettings:
    epochs: int
    batch: int = 2
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    class_weights: tuple[float, float] = (1.0, 5.0)
    seed: int = 0
    # search only
    alpha_start_epoch: int = 15
    arch_lr: float = 0.1
    # retrain only
    select_from: int = 0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    valid_miou: float
    mean_entropy: float = float("nan")
    arch_updated: bool = False


@dataclass
class SearchResult:
    epochs: list[EpochRecord]
    entropy: EntropyTrace


@dataclass
class RetrainResult:
    epochs: list[EpochRecord]
    best_epoch: int
    best_valid_miou: float
    best_state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def predict(forward: Callable[[Tensor], Tensor], images: np.ndarray, batch: int) -> np.ndarray:
    preds = []
    with no_grad():
        for start in range(0, len(images), batch):
            logits = forward(Tensor(images[start : start + batch]))
            preds.append(predict_mask(logits.data))
    return np.concatenate(preds) if preds else np.zeros((0,) + images.shape[2:], dtype=np.uint8)


def _cast(images: np.ndarray, like: Sequence[Tensor]) -> np.ndarray:
    dtype = like[0].dtype if like else np.float32
    return images.astype(dtype, copy=False)


def run_search(supernet: SuperNet, train: DatasetSplit, valid: DatasetSplit, settings: TrainSettings,
               on_epoch: Callable[[EpochRecord], None] | None = None) -> SearchResult:
    """Train layer weights every step; architecture parameters once the gate opens.

    Both updates use the same training batch; the validation split only scores epochs.
    """
    weights = supernet.weights()
    state = TrainState(weights)
    arch_opt = ArchOptimizer(supernet.arch, settings.arch_lr)
    order_rng = np.random.default_rng(np.random.SeedSequence(settings.seed).spawn(1)[0])
    steps_per_epoch = max(1, -(-len(train) // settings.batch))
    total = settings.epochs * steps_per_epoch
    trace = EntropyTrace()
    records = []
    for epoch in range(settings.epochs):
        gate = arch_update_gate(epoch, settings.alpha_start_epoch)
        for t in supernet.arch.parameters():
            t.requires_grad = gate
        losses = []
        lr = settings.lr0
        for images, masks in train.batches(settings.batch, order_rng):
            lr = cosine_lr(state.step, total, settings.lr0)
            state.zero_grad()
            arch_opt.zero_grad()
            logits = supernet_forward(supernet, Tensor(_cast(images, weights)), "search")
            loss = weighted_cross_entropy(logits, masks, settings.class_weights)
            loss.backward()
            sgd_momentum_step(state, lr, settings.momentum, settings.weight_decay)
            if gate:
                arch_opt.step()
            losses.append(float(loss.data))
        state.epoch += 1
        preds = predict(lambda x: supernet_forward(supernet, x, "eval"), _cast(valid.images, weights), settings.batch)
        dists = {f"{ct}:{i}->{j}": row
                 for ct in supernet.arch.alpha
                 for (i, j), row in zip(supernet.topology.cell.edges, supernet.arch.op_probabilities(ct))}
        trace.record(epoch, dists)
        rec = EpochRecord(epoch, float(np.mean(losses)), lr, mean_iou(preds, valid.masks),
                          trace.summary()[-1][1], gate)
        log.info("search epoch %d loss %.4f valid mIoU %.4f entropy %.4f", epoch, rec.loss, rec.valid_miou,
                 rec.mean_entropy)
        records.append(rec)
        if on_epoch:
            on_epoch(rec)
    for t in supernet.arch.parameters():
        t.requires_grad = True
    return SearchResult(records, trace)


def run_retrain(network: SearchNetwork, train: DatasetSplit, valid: DatasetSplit, settings: TrainSettings,
                on_epoch: Callable[[EpochRecord], None] | None = None) -> RetrainResult:
    """SGD with cosine schedule; keeps the weights with the best validation MeanIoU
    among epochs ``>= settings.select_from`` (clamped to the last epoch)."""
    weights = network.parameters()
    state = TrainState(weights)
    order_rng = np.random.default_rng(np.random.SeedSequence(settings.seed).spawn(1)[0])
    steps_per_epoch = max(1, -(-len(train) // settings.batch))
    total = settings.epochs * steps_per_epoch
    floor = min(settings.select_from, settings.epochs - 1)
    records, best_epoch, best_miou, best_state = [], -1, -1.0, {}
    for epoch in range(settings.epochs):
        losses = []
        lr = settings.lr0
        for images, masks in train.batches(settings.batch, order_rng):
            lr = cosine_lr(state.step, total, settings.lr0)
            state.zero_grad()
            loss = weighted_cross_entropy(network(Tensor(_cast(images, weights))), masks, settings.class_weights)
            loss.backward()
            sgd_momentum_step(state, lr, settings.momentum, settings.weight_decay)
            losses.append(float(loss.data))
        state.epoch += 1
        preds = predict(network, _cast(valid.images, weights), settings.batch)
        rec = EpochRecord(epoch, float(np.mean(losses)), lr, mean_iou(preds, valid.masks))
        log.info("retrain epoch %d loss %.4f valid mIoU %.4f", epoch, rec.loss, rec.valid_miou)
        records.append(rec)
        if epoch >= floor and rec.valid_miou > best_miou:
            best_epoch, best_miou = epoch, rec.valid_miou
            best_state = {name: p.data.copy() for name, p in network.named_parameters()}
        if on_epoch:
            on_epoch(rec)
    return RetrainResult(records, best_epoch, best_miou, best_state)


def evaluate(network: SearchNetwork, split: DatasetSplit, batch: int = 4,
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> tuple[EvalReport, np.ndarray]:
    weights = network.parameters()
    preds = predict(network, _cast(split.images, weights), batch)
    return pr_curve(preds, split.masks, thresholds), preds
