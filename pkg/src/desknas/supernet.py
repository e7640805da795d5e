"""Continuous relaxation of a topology into one trainable network.

The same :class:`SearchNetwork` class instantiates both the supernet (every
template edge carries all candidate operations, weighted by architecture
parameters) and a decoded discrete network (one operation per kept edge).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .genotype import Genotype
from .space import CellTemplate, NetworkTemplate, Topology
from .tensor import functional as F
from .tensor.core import (
    ShapeError,
    Tensor,
    add,
    concat,
    relu,
    scale_by,
    softmax,
    take,
    weighted_sum,
)
from .tensor.layers import Conv2d, Module, Norm, ReLUConvNorm, build_op

ARCH_SCHEMA = "desknas-arch/1"
THETA_FLOOR = 1e-12


# -- relaxation primitives -------------------------------------------------

def mixed_op_forward(x: Tensor, alpha_row: Tensor, ops: Sequence[Module], theta_mode: bool = False) -> Tensor:
    """Weighted sum of all candidate operations applied to ``x``.

    Weights are ``softmax(alpha_row)``, or ``alpha_row`` itself when it already
    holds simplex probabilities (``theta_mode``).
    """
    if alpha_row.shape != (len(ops),):
        raise ShapeError("mixed_op", (len(ops),), alpha_row.shape)
    weights = alpha_row if theta_mode else softmax(alpha_row)
    outs = [op(x) for op in ops]
    shapes = {o.shape for o in outs}
    if len(shapes) > 1:
        detail = ", ".join(f"{getattr(op, 'name', type(op).__name__)}={o.shape}" for op, o in zip(ops, outs))
        raise ShapeError("mixed_op", "identical output shapes", detail)
    return weighted_sum(weights, outs)


@dataclass(frozen=True)
class ChannelMask:
    edge: str
    mask: np.ndarray
    k: int

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def bypassed(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)


def channel_subset(channels: int, k: int) -> int:
    return math.ceil(channels / k)


def sample_channel_mask(channels: int, k: int, rng: np.random.Generator | None, edge: str = "") -> ChannelMask:
    """Uniformly choose ``ceil(C/K)`` channels; without an rng the first ones are taken."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if k > channels:
        raise ValueError(f"K={k} exceeds the channel count {channels}")
    n = channel_subset(channels, k)
    mask = np.zeros(channels, dtype=bool)
    if rng is None:
        mask[:n] = True
    else:
        mask[rng.choice(channels, size=n, replace=False)] = True
    return ChannelMask(edge, mask, k)


def partial_channel_forward(x: Tensor, alpha_row: Tensor, ops: Sequence[Module], k: int,
                            rng: np.random.Generator | None = None, theta_mode: bool = False,
                            stride: int = 1, mask: ChannelMask | None = None) -> Tensor:
    """Mixed operation on a random ``1/K`` channel subset; other channels bypass it.

    ``ops`` must be built for ``ceil(C/K)`` channels. With a full mask this is
    exactly :func:`mixed_op_forward`.
    """
    channels = x.shape[1]
    if k > channels:
        raise ValueError(f"K={k} exceeds the channel count {channels}")
    if mask is None:
        mask = sample_channel_mask(channels, k, rng)
    selected, bypassed = mask.selected, mask.bypassed
    if bypassed.size == 0:
        return mixed_op_forward(x, alpha_row, ops, theta_mode)
    mixed = mixed_op_forward(take(x, selected, 1), alpha_row, ops, theta_mode)
    rest = F.subsample(take(x, bypassed, 1), stride)
    merged = concat([mixed, rest], axis=1)
    order = np.argsort(np.concatenate([selected, bypassed]), kind="stable")
    return take(merged, order, 1)


def node_forward(edge_outputs: Sequence[Tensor], gamma_values: Tensor | None = None,
                 theta_mode: bool = False) -> Tensor:
    """Aggregate incoming edges: plain sum, or softmax(gamma)-weighted sum."""
    if not edge_outputs:
        raise ValueError("a node needs at least one incoming edge")
    if gamma_values is None:
        out = edge_outputs[0]
        for t in edge_outputs[1:]:
            out = add(out, t)
        return out
    if gamma_values.shape != (len(edge_outputs),):
        raise ShapeError("node", (len(edge_outputs),), gamma_values.shape)
    weights = gamma_values if theta_mode else softmax(gamma_values)
    return weighted_sum(weights, edge_outputs)


# -- architecture parameters ------------------------------------------------

def _uniform_groups(size: int, groups: list[list[int]]) -> np.ndarray:
    out = np.zeros(size, dtype=np.float64)
    for g in groups:
        out[g] = 1.0 / len(g)
    return out


class ArchParams:
    """alpha (op logits) and gamma (edge logits) per cell type, beta per network edge.

    In ``theta_mode`` all three hold probabilities: every alpha row, every
    block's gamma group and every node's beta group sums to one and is used
    directly instead of through a softmax.
    """

    def __init__(self, topology: Topology, theta_mode: bool = False):
        self.topology = topology
        self.theta_mode = theta_mode
        cell, net = topology.cell, topology.network
        n_ops = len(topology.space)
        self.cell_groups = [cell.in_edges(b) for b in cell.blocks]
        self.net_groups = [net.in_edges(v) for v in range(len(net.nodes)) if net.in_edges(v)]
        dtype = np.float64
        self.alpha: dict[str, Tensor] = {}
        self.gamma: dict[str, Tensor] = {}
        for ct in topology.cell_types():
            a = np.full((len(cell.edges), n_ops), 1.0 / n_ops) if theta_mode else np.zeros((len(cell.edges), n_ops))
            g = _uniform_groups(len(cell.edges), self.cell_groups) if theta_mode else np.zeros(len(cell.edges))
            self.alpha[ct] = Tensor(a.astype(dtype), requires_grad=True, name=f"alpha.{ct}")
            self.gamma[ct] = Tensor(g.astype(dtype), requires_grad=True, name=f"gamma.{ct}")
        b = _uniform_groups(len(net.edges), self.net_groups) if theta_mode else np.zeros(len(net.edges))
        self.beta = Tensor(b.astype(dtype), requires_grad=True, name="beta")

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for ct in self.alpha:
            out[f"alpha.{ct}"] = self.alpha[ct]
            out[f"gamma.{ct}"] = self.gamma[ct]
        out["beta"] = self.beta
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.tensors().values())

    def op_weights(self, cell_type: str) -> Tensor:
        a = self.alpha[cell_type]
        return a if self.theta_mode else softmax(a, axis=1)

    def _group(self, t: Tensor, ids: list[int]) -> Tensor:
        sub = take(t, np.asarray(ids), 0)
        return sub if self.theta_mode else softmax(sub)

    def edge_weights(self, cell_type: str, edge_ids: list[int]) -> Tensor:
        return self._group(self.gamma[cell_type], edge_ids)

    def network_weights(self, edge_ids: list[int]) -> Tensor:
        return self._group(self.beta, edge_ids)

    # logits view used by decoders: softmax(logit) reproduces theta exactly
    def alpha_logits(self, cell_type: str) -> np.ndarray:
        a = self.alpha[cell_type].data.astype(np.float64)
        return np.log(np.maximum(a, THETA_FLOOR)) if self.theta_mode else a

    def gamma_logits(self, cell_type: str) -> np.ndarray:
        g = self.gamma[cell_type].data.astype(np.float64)
        return np.log(np.maximum(g, THETA_FLOOR)) if self.theta_mode else g

    def beta_logits(self) -> np.ndarray:
        b = self.beta.data.astype(np.float64)
        return np.log(np.maximum(b, THETA_FLOOR)) if self.theta_mode else b

    def op_probabilities(self, cell_type: str) -> np.ndarray:
        a = self.alpha_logits(cell_type)
        e = np.exp(a - a.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def to_dict(self) -> dict:
        cell = self.topology.cell
        return {
            "schema": ARCH_SCHEMA,
            "theta_mode": self.theta_mode,
            "ops": list(self.topology.space.ops),
            "cells": {
                ct: {
                    "edges": [f"{i}->{j}" for i, j in cell.edges],
                    "alpha": self.alpha[ct].data.tolist(),
                    "gamma": self.gamma[ct].data.tolist(),
                }
                for ct in self.alpha
            },
            "network": {
                "edges": [f"{u}->{v}" for u, v in self.topology.network.edges],
                "beta": self.beta.data.tolist(),
            },
            "topology": self.topology.to_dict(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d: dict, topology: Topology | None = None) -> "ArchParams":
        if d.get("schema") != ARCH_SCHEMA:
            raise ValueError(f"unsupported arch checkpoint schema {d.get('schema')!r}")
        topology = topology or Topology.from_dict(d["topology"])
        arch = cls(topology, theta_mode=d["theta_mode"])
        for ct, cd in d["cells"].items():
            arch.alpha[ct].data = np.asarray(cd["alpha"], dtype=arch.alpha[ct].dtype).reshape(arch.alpha[ct].shape)
            arch.gamma[ct].data = np.asarray(cd["gamma"], dtype=arch.gamma[ct].dtype).reshape(arch.gamma[ct].shape)
        arch.beta.data = np.asarray(d["network"]["beta"], dtype=arch.beta.dtype).reshape(arch.beta.shape)
        return arch

    @classmethod
    def load(cls, path, topology: Topology | None = None) -> "ArchParams":
        return cls.from_dict(json.loads(Path(path).read_text()), topology)


# -- network modules -------------------------------------------------------

def resample(x: Tensor, from_scale: int, to_scale: int) -> Tensor:
    if from_scale < to_scale:
        return F.downsample_avg(x, 2 ** (to_scale - from_scale))
    if from_scale > to_scale:
        return F.upsample_nearest(x, 2 ** (from_scale - to_scale))
    return x


def pointwise(c_in: int, c_out: int, rng, name: str) -> ReLUConvNorm:
    return ReLUConvNorm([Conv2d(c_in, c_out, 1, rng, name=name)], c_out)


class Stem(Module):
    """Fixed front block; each stride-2 convolution halves the resolution."""

    def __init__(self, c_in: int, c_out: int, strides: int, rng):
        n = max(strides, 1)
        self.convs = [Conv2d(c_in if i == 0 else c_out, c_out, 3, rng, stride=2 if i < strides else 1,
                             name=f"stem.{i}") for i in range(n)]
        self.norms = [Norm(c_out) for _ in range(n)]

    def forward(self, x: Tensor) -> Tensor:
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            if i:
                x = relu(x)
            x = norm(conv(x))
        return x


class Cell(Module):
    """One cell instance. ``edge_ops[e]`` lists the candidate ops of template edge ``e``
    (empty when the edge was dropped by decoding)."""

    def __init__(self, template: CellTemplate, channels: int, edge_ops: Sequence[Sequence[str]],
                 rng: np.random.Generator, pc_k: int = 1, name: str = "cell"):
        self.name = name
        self.template = template
        self.channels = channels
        self.pc_k = pc_k
        n_in = template.num_input_nodes
        self.edge_ops = [tuple(ops) for ops in edge_ops]
        self.ops: list[list[Module]] = []
        self.strides: list[int] = []
        for e, ((i, j), kinds) in enumerate(zip(template.edges, self.edge_ops)):
            stride = 2 if template.reduction and i < n_in else 1
            c_op = channel_subset(channels, pc_k) if len(kinds) > 1 else channels
            self.strides.append(stride)
            self.ops.append([build_op(kind, c_op, stride, rng, f"{name}.{i}->{j}.{kind}") for kind in kinds])

    @property
    def out_channels(self) -> int:
        if self.template.style == "resnext":
            return self.channels
        return self.channels * self.template.num_blocks

    def forward(self, inputs: Sequence[Tensor], op_weights: Tensor | None = None,
                edge_weight_fn=None, theta_mode: bool = False, mode: str = "search",
                rng: np.random.Generator | None = None) -> Tensor:
        t = self.template
        states: list[Tensor | None] = list(inputs) + [None] * t.num_blocks
        for b in t.blocks:
            edge_ids = [e for e in t.in_edges(b) if self.ops[e]]
            outs = []
            for e in edge_ids:
                x = states[t.edges[e][0]]
                ops = self.ops[e]
                if op_weights is None:
                    outs.append(ops[0](x))
                elif self.pc_k > 1:
                    mask = sample_channel_mask(x.shape[1], self.pc_k, rng if mode == "search" else None,
                                               f"{self.name}.{t.edges[e]}")
                    outs.append(partial_channel_forward(x, op_weights[e], ops, self.pc_k,
                                                        theta_mode=theta_mode, stride=self.strides[e],
                                                        mask=mask))
                else:
                    outs.append(mixed_op_forward(x, op_weights[e], ops, theta_mode))
            try:
                gamma = edge_weight_fn(edge_ids) if edge_weight_fn is not None else None
                states[b] = node_forward(outs, gamma, theta_mode)
            except ValueError as exc:
                raise ValueError(f"{self.name} block {b}: {exc}") from exc
        if t.style == "resnext":
            ends = [states[b] for b in t.output_blocks()]
            return node_forward(ends + [F.subsample(states[0], 2 if t.reduction else 1)])
        return concat([states[b] for b in t.blocks], axis=1)


class SearchNetwork(Module):
    """Stem, cells wired by a network template, and a 2-class per-pixel head."""

    def __init__(self, topology: Topology, cell_ops: dict[str, list[list[str]]],
                 network: NetworkTemplate | None = None, rng: np.random.Generator | None = None,
                 pc_k: int = 1, in_channels: int = 1, num_classes: int = 2):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.topology = topology
        self.network = network or topology.network
        net = self.network
        width0 = net.nodes[0].width if net.nodes[0].scale == 0 else net.nodes[0].width // 2 ** net.nodes[0].scale
        self.stem_width = width0
        self.stem = Stem(in_channels, width0, net.stem_strides, rng)
        self.parent_pre: list[Module] = []
        self.grand_pre: list[Module | None] = []
        self.cells: list[Cell] = []
        self._grand: list[int | None] = []
        out_ch: list[int] = []
        for v, node in enumerate(net.nodes):
            preds = net.predecessors(v)
            c_in = sum(out_ch[u] for u in preds) if preds else width0
            self.parent_pre.append(pointwise(c_in, node.width, rng, f"{node.name}.pre1"))
            grand = self._grandparent(v)
            self._grand.append(grand)
            if topology.cell.num_input_nodes >= 2:
                c_g = out_ch[grand] if grand is not None else width0
                self.grand_pre.append(pointwise(c_g, node.width, rng, f"{node.name}.pre0"))
            else:
                self.grand_pre.append(None)
            ct = "reduce" if node.reduction else "normal"
            cell = Cell(topology.cell.with_reduction(node.reduction), node.width, cell_ops[ct], rng,
                        pc_k, name=node.name)
            self.cells.append(cell)
            out_ch.append(cell.out_channels)
        self.out_channels = out_ch
        self.head = Conv2d(out_ch[net.sink], num_classes, 1, rng, bias=True, name="head")

    def _grandparent(self, v: int) -> int | None:
        preds = self.network.predecessors(v)
        if not preds:
            return None
        parent_preds = self.network.predecessors(max(preds))
        return max(parent_preds) if parent_preds else None

    def forward(self, x: Tensor, arch: ArchParams | None = None, mode: str = "search",
                rng: np.random.Generator | None = None, edge_norm: bool = True) -> Tensor:
        if x.ndim != 4:
            raise ShapeError("input", "(N, C, H, W)", x.shape)
        h, w = x.shape[2], x.shape[3]
        net = self.network
        factor = 2 ** (net.stem_strides + net.max_scale())
        if h % factor or w % factor:
            raise ShapeError("input", f"H and W divisible by {factor}", x.shape)
        stem = self.stem(x)
        outputs: list[Tensor] = []
        theta = arch is not None and arch.theta_mode
        for v, node in enumerate(net.nodes):
            preds = net.predecessors(v)
            try:
                if preds:
                    pieces = [resample(outputs[u], net.nodes[u].scale, node.input_scale) for u in preds]
                    if arch is not None and len(preds) > 1:
                        ids = self._template_edge_ids(v, preds)
                        beta = arch.network_weights(ids)
                        pieces = [scale_by(p, beta[i]) for i, p in enumerate(pieces)]
                    parent = self.parent_pre[v](concat(pieces, axis=1))
                else:
                    parent = self.parent_pre[v](resample(stem, 0, node.input_scale))
                inputs = [parent]
                if self.grand_pre[v] is not None:
                    g = self._grand[v]
                    src, scale = (stem, 0) if g is None else (outputs[g], net.nodes[g].scale)
                    inputs.insert(0, self.grand_pre[v](resample(src, scale, node.input_scale)))
                ct = "reduce" if node.reduction else "normal"
                if arch is None:
                    out = self.cells[v](inputs)
                else:
                    fn = (lambda ids, ct=ct: arch.edge_weights(ct, ids)) if edge_norm else None
                    out = self.cells[v](inputs, arch.op_weights(ct), fn, theta, mode, rng)
            except ShapeError as exc:
                raise ShapeError(f"node {node.name} / {exc.node}", exc.expected, exc.actual) from exc
            outputs.append(out)
        logits = self.head(outputs[net.sink])
        return F.resize_bilinear(logits, (h, w))

    def _template_edge_ids(self, v: int, preds: list[int]) -> list[int]:
        # arch beta is indexed by edges of the full template, this network may be a subnetwork
        full = self.topology.network
        names = [n.name for n in full.nodes]
        lookup = {e: i for i, e in enumerate(full.edges)}
        tv = names.index(self.network.nodes[v].name)
        return [lookup[(names.index(self.network.nodes[u].name), tv)] for u in preds]


def supernet_cell_ops(topology: Topology) -> dict[str, list[list[str]]]:
    ops = list(topology.space.ops)
    return {ct: [ops for _ in topology.cell.edges] for ct in topology.cell_types()}


def genotype_cell_ops(genotype: Genotype) -> dict[str, list[list[str]]]:
    template = genotype.topology.cell
    out = {}
    for ct, cell in genotype.cells.items():
        chosen = {(i, j): op for i, j, op in cell.edges}
        out[ct] = [[chosen[e]] if e in chosen else [] for e in template.edges]
    return out


class SuperNet:
    """Supernet weights, architecture parameters and the mask RNG of one search run."""

    def __init__(self, topology: Topology, seed: int = 0, pc_k: int = 1, edge_norm: bool = True,
                 theta_mode: bool = False, in_channels: int = 1):
        seeds = np.random.SeedSequence(seed).spawn(2)
        self.topology = topology
        self.pc_k = pc_k
        self.edge_norm = edge_norm
        self.net = SearchNetwork(topology, supernet_cell_ops(topology), rng=np.random.default_rng(seeds[0]),
                                 pc_k=pc_k, in_channels=in_channels)
        self.arch = ArchParams(topology, theta_mode)
        self.rng = np.random.default_rng(seeds[1])

    def weights(self) -> list[Tensor]:
        return self.net.parameters()

    def __call__(self, batch: Tensor, mode: str = "search") -> Tensor:
        return supernet_forward(self, batch, mode)


def supernet_forward(net: SuperNet, batch: Tensor, mode: str = "search",
                     rng: np.random.Generator | None = None) -> Tensor:
    """Per-pixel logits ``(N, 2, H, W)``; search mode redraws channel masks."""
    if mode not in ("search", "eval"):
        raise ValueError(f"mode must be 'search' or 'eval', got {mode!r}")
    rng = rng if rng is not None else net.rng
    return net.net(batch, net.arch, mode, rng if mode == "search" else None, net.edge_norm)


def build_discrete_network(genotype: Genotype, seed: int = 0, in_channels: int = 1) -> SearchNetwork:
    genotype.validate()
    return SearchNetwork(genotype.topology, genotype_cell_ops(genotype), genotype.network,
                         rng=np.random.default_rng(seed), in_channels=in_channels)
