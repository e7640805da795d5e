"""Turn trained architecture parameters into a discrete :class:`Genotype`."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .genotype import CellGenotype, Genotype, full_network_edges
from .space import DEFAULT_PATH_CAP, CellTemplate, NetworkTemplate, Topology, enumerate_paths, path_edges

ZERO_OP = "cut"


def _softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


def decode_edge_argmax(alpha_row: Sequence[float], ops: Sequence[str]) -> str:
    """Operation with the largest logit; ties go to the earliest op in space order."""
    if len(alpha_row) != len(ops):
        raise ValueError(f"alpha row has {len(alpha_row)} entries for {len(ops)} ops")
    return ops[int(np.argmax(alpha_row))]


def decode_edge_normalized(alpha_row: Sequence[float], gamma_weight: float, ops: Sequence[str]) -> tuple[str, float]:
    """Op choice and ranking strength ``max softmax(alpha) * gamma_weight``.

    ``gamma_weight`` is the edge's softmax weight among its sibling edges; a
    positive per-edge factor cannot change the within-edge argmax.
    """
    probs = _softmax(alpha_row)
    best = int(np.argmax(probs))
    return ops[best], float(probs[best] * gamma_weight)


@dataclass(frozen=True)
class EdgeChoice:
    edge: int
    source: int
    block: int
    op: str
    strength: float


def rank_cell_edges(template: CellTemplate, alpha: np.ndarray, ops: Sequence[str],
                    gamma: np.ndarray | None = None) -> list[EdgeChoice]:
    """Chosen op and strength of every template edge.

    Without ``gamma`` the strength is the winning op's softmax probability; with
    it, that probability times the edge's softmax weight among its block's inputs.
    """
    choices = []
    for b in template.blocks:
        ids = template.in_edges(b)
        gw = _softmax(gamma[ids]) if gamma is not None else np.ones(len(ids))
        for e, w in zip(ids, gw):
            op, s = decode_edge_normalized(alpha[e], float(w), ops)
            choices.append(EdgeChoice(e, template.edges[e][0], b, op, s))
    return choices


def select_block_edges(candidates: Sequence[EdgeChoice], k: int | None) -> list[EdgeChoice]:
    """Keep the ``k`` strongest inputs of one block.

    Zero-op edges are dropped first; if every candidate decodes to the zero op,
    the single strongest edge is kept so the block still has an input.
    """
    ranked = sorted(candidates, key=lambda c: (-c.strength, c.source))
    useful = [c for c in ranked if c.op != ZERO_OP]
    if not useful:
        return ranked[:1]
    return useful if k is None else useful[:k]


def decode_cell_topk(template: CellTemplate, alpha: np.ndarray, ops: Sequence[str], k: int | None = 2,
                     gamma: np.ndarray | None = None) -> CellGenotype:
    """Per block, keep the ``k`` strongest input edges (all when ``k`` is None)."""
    if k is not None and k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    choices = rank_cell_edges(template, alpha, ops, gamma)
    kept = []
    for b in template.blocks:
        kept.extend(select_block_edges([c for c in choices if c.block == b], k))
    return CellGenotype(tuple((c.source, c.block, c.op) for c in kept))


def decode_cell_argmax(template: CellTemplate, alpha: np.ndarray, ops: Sequence[str]) -> CellGenotype:
    """Every template edge kept with its argmax op."""
    return CellGenotype(tuple((i, j, decode_edge_argmax(alpha[e], ops)) for e, (i, j) in enumerate(template.edges)))


# -- network level ---------------------------------------------------------

@dataclass(frozen=True)
class PathScore:
    path: tuple[int, ...]
    score: float


def edge_log_probs(beta: np.ndarray, network: NetworkTemplate) -> np.ndarray:
    """log softmax of beta over each node's incoming network edges."""
    beta = np.asarray(beta, dtype=np.float64)
    out = np.zeros(len(network.edges))
    for v in range(len(network.nodes)):
        ids = network.in_edges(v)
        if ids:
            b = beta[ids]
            m = b.max()
            out[ids] = b - m - math.log(np.exp(b - m).sum())
    return out


def viterbi_best_path(beta: np.ndarray, network: NetworkTemplate) -> PathScore:
    """Maximum total log-probability source-to-sink path by dynamic programming."""
    logp = edge_log_probs(beta, network)
    n = len(network.nodes)
    best = np.full(n, -np.inf)
    back = [-1] * n
    best[network.source] = 0.0
    for v in range(n):
        for e in network.in_edges(v):
            u = network.edges[e][0]
            cand = best[u] + logp[e]
            if cand > best[v] or (cand == best[v] and back[v] > u):
                best[v], back[v] = cand, u
    path = [network.sink]
    while path[-1] != network.source:
        path.append(back[path[-1]])
    return PathScore(tuple(reversed(path)), float(best[network.sink]))


def score_paths(beta: np.ndarray, network: NetworkTemplate, cap: int = DEFAULT_PATH_CAP) -> list[PathScore]:
    """Average per-edge log-likelihood of every source-to-sink path."""
    logp = edge_log_probs(beta, network)
    scores = []
    for p in enumerate_paths(network, cap):
        ids = path_edges(network, p)
        scores.append(PathScore(p, float(logp[ids].mean()) if ids else 0.0))
    return scores


def gaussian_cutoff(scores: Sequence[float]) -> tuple[float, float, float]:
    """Mean, population standard deviation and the ``mean + 3 std`` cutoff."""
    s = np.asarray(scores, dtype=np.float64)
    mu = float(s.mean())
    sigma = float(s.std())
    return mu, sigma, mu + 3.0 * sigma


def multipath_decode(beta: np.ndarray, network: NetworkTemplate,
                     cap: int = DEFAULT_PATH_CAP) -> tuple[list[PathScore], list[int]]:
    """Paths scoring at least ``mean + 3 std``; the single best path if none do.

    Returns the kept paths and the sorted union of their network edge indices.
    """
    scores = score_paths(beta, network, cap)
    mu, sigma, cutoff = gaussian_cutoff([s.score for s in scores])
    tol = 1e-12 * max(1.0, abs(mu))
    kept = [s for s in scores if s.score >= cutoff - tol]
    if not kept:
        kept = [max(scores, key=lambda s: s.score)]
    edges = sorted({e for s in kept for e in path_edges(network, s.path)})
    return kept, edges


# -- whole genotype --------------------------------------------------------

CELL_MODES = ("argmax", "topk", "normalized")
PATH_MODES = ("all", "viterbi", "multipath")


def decode(topology: Topology, alpha: dict[str, np.ndarray], gamma: dict[str, np.ndarray] | None,
           beta: np.ndarray, cell_mode: str = "topk", k: int = 2, path_mode: str = "all",
           cap: int = DEFAULT_PATH_CAP) -> Genotype:
    """Decode every cell type and the network structure.

    ``cell_mode``: ``argmax`` keeps all edges, ``topk`` ranks edges by op
    probability, ``normalized`` ranks by op probability times edge weight.
    ``path_mode``: keep the whole network, the Viterbi path, or the
    Gaussian-cutoff path set.
    """
    if cell_mode not in CELL_MODES:
        raise ValueError(f"unknown cell decode mode {cell_mode!r}; valid: {CELL_MODES}")
    if path_mode not in PATH_MODES:
        raise ValueError(f"unknown path mode {path_mode!r}; valid: {PATH_MODES}")
    ops = topology.space.ops
    cells = {}
    for ct in topology.cell_types():
        if cell_mode == "argmax":
            cells[ct] = decode_cell_argmax(topology.cell, alpha[ct], ops)
        else:
            g = gamma[ct] if (cell_mode == "normalized" and gamma is not None) else None
            cells[ct] = decode_cell_topk(topology.cell, alpha[ct], ops, k, g)
    network = topology.network
    if path_mode == "all":
        edges = full_network_edges(topology)
        paths: tuple = ()
    elif path_mode == "viterbi":
        best = viterbi_best_path(beta, network)
        edges = tuple(path_edges(network, best.path))
        paths = (best.path,)
    else:
        kept, edge_list = multipath_decode(beta, network, cap)
        edges = tuple(edge_list)
        paths = tuple(s.path for s in kept)
    genotype = Genotype(topology, cells, tuple(edges), paths)
    genotype.validate()
    return genotype


def decode_arch(arch, cell_mode: str = "topk", k: int = 2, path_mode: str = "all") -> Genotype:
    topo = arch.topology
    alpha = {ct: arch.alpha_logits(ct) for ct in arch.alpha}
    gamma = {ct: arch.gamma_logits(ct) for ct in arch.gamma}
    return decode(topo, alpha, gamma, arch.beta_logits(), cell_mode, k, path_mode)


# -- DOT export ------------------------------------------------------------

def cell_to_dot(cell: CellGenotype, template: CellTemplate, name: str = "cell") -> str:
    lines = [f'digraph "{name}" {{', "  rankdir=LR;"]
    for i in range(template.num_input_nodes):
        lines.append(f'  n{i} [label="in{i}", shape=box];')
    for b in template.blocks:
        lines.append(f'  n{b} [label="{b}"];')
    lines.append('  out [label="out", shape=box];')
    for i, j, op in cell.edges:
        lines.append(f'  n{i} -> n{j} [label="{op}"];')
    for b in template.output_blocks():
        lines.append(f"  n{b} -> out;")
    lines.append("}")
    return "\n".join(lines) + "\n"


def network_to_dot(genotype: Genotype, name: str = "network") -> str:
    net = genotype.topology.network
    kept = set(genotype.network_edges)
    nodes = sorted({u for e in kept for u in net.edges[e]} | {net.source, net.sink})
    lines = [f'digraph "{name}" {{', "  rankdir=LR;"]
    for v in nodes:
        node = net.nodes[v]
        kind = "reduce" if node.reduction else "normal"
        lines.append(f'  {node.name} [label="{node.name}\\n{kind} s{node.scale}"];')
    for e in sorted(kept):
        u, v = net.edges[e]
        lines.append(f"  {net.nodes[u].name} -> {net.nodes[v].name};")
    lines.append("}")
    return "\n".join(lines) + "\n"
