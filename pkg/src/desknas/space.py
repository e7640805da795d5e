"""Operation spaces, cell templates and network templates.

A :class:`Topology` pairs a cell DAG (what each searched cell looks like) with a
network DAG (how cells are wired into a segmentation network) and the list of
candidate operations placed on every cell edge.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .tensor.layers import OPS

BASE_OPS = (
    "dil_conv_3x3", "dil_conv_5x5", "sep_conv_3x3", "sep_conv_5x5",
    "avg_pool_3x3", "max_pool_3x3", "skip", "cut",
)
LARGE_OPS = (
    "conv2d_1", "conv2d_2", "conv2d_3",
    "depthconv2d_1", "depthconv2d_2", "depthconv2d_3",
    "splitconv2d_1", "splitconv2d_2", "splitconv2d_3",
    "skip", "cut",
)
SPACES = {"base": BASE_OPS, "large": LARGE_OPS}

DEFAULT_PATH_CAP = 10_000


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    name: str
    ops: tuple[str, ...]

    def __post_init__(self):
        if not self.ops:
            raise TemplateError("operation space must not be empty")
        if len(set(self.ops)) != len(self.ops):
            raise TemplateError(f"duplicate operations in {self.ops}")
        unknown = [o for o in self.ops if o not in OPS]
        if unknown:
            raise TemplateError(f"unknown operations {unknown}; known: {sorted(OPS)}")

    def __len__(self) -> int:
        return len(self.ops)

    def index(self, op: str) -> int:
        return self.ops.index(op)


def build_operation_space(kind: str | Sequence[str]) -> SearchSpace:
    if isinstance(kind, str):
        if kind not in SPACES:
            raise TemplateError(f"unknown operation space {kind!r}; valid: {sorted(SPACES)} or a list of ops")
        return SearchSpace(kind, SPACES[kind])
    return SearchSpace("custom", tuple(kind))


@dataclass(frozen=True)
class CellTemplate:
    """DAG of one searched cell.

    Nodes ``0 .. num_input_nodes-1`` are the cell inputs; blocks follow. Each
    edge ``(i, j)`` has ``i < j`` and carries one (mixed) operation.
    """

    style: str
    num_blocks: int
    num_input_nodes: int
    edges: tuple[tuple[int, int], ...]
    towers: int = 0
    tower_depth: int = 0
    reduction: bool = False

    @property
    def num_nodes(self) -> int:
        return self.num_input_nodes + self.num_blocks

    @property
    def blocks(self) -> range:
        return range(self.num_input_nodes, self.num_nodes)

    def in_edges(self, block: int) -> list[int]:
        """Indices into ``edges`` of the edges entering ``block``."""
        return [e for e, (_, j) in enumerate(self.edges) if j == block]

    def output_blocks(self) -> list[int]:
        if self.style == "resnext":
            n = self.num_input_nodes
            return [n + t * self.tower_depth + self.tower_depth - 1 for t in range(self.towers)]
        return list(self.blocks)

    def with_reduction(self, reduction: bool) -> "CellTemplate":
        return replace(self, reduction=reduction)

    def validate(self) -> None:
        for i, j in self.edges:
            if not 0 <= i < j < self.num_nodes or j < self.num_input_nodes:
                raise TemplateError(f"invalid cell edge ({i}, {j})")
        if len(set(self.edges)) != len(self.edges):
            raise TemplateError("duplicate cell edges")
        for b in self.blocks:
            n_in = len(self.in_edges(b))
            if n_in == 0:
                raise TemplateError(f"block {b} has no input edge")
            if self.style == "resnext" and n_in != 1:
                raise TemplateError(f"resnext block {b} must have exactly one input edge")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["edges"] = [list(e) for e in self.edges]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CellTemplate":
        d = dict(d)
        d["edges"] = tuple(tuple(e) for e in d["edges"])
        return cls(**d)


def build_cell_template(style: str, num_blocks: int = 4, num_input_nodes: int | None = None,
                        towers: int = 4, tower_depth: int = 2) -> CellTemplate:
    if style == "darts":
        if num_blocks < 1:
            raise TemplateError("num_blocks must be >= 1")
        n_in = 2 if num_input_nodes is None else num_input_nodes
        edges = tuple((i, j) for j in range(n_in, n_in + num_blocks) for i in range(j))
        cell = CellTemplate("darts", num_blocks, n_in, edges)
    elif style == "resnext":
        if towers < 1 or tower_depth < 1:
            raise TemplateError("towers and tower_depth must be >= 1")
        edges = []
        for t in range(towers):
            first = 1 + t * tower_depth
            edges.append((0, first))
            edges.extend((first + d - 1, first + d) for d in range(1, tower_depth))
        cell = CellTemplate("resnext", towers * tower_depth, 1, tuple(edges),
                            towers=towers, tower_depth=tower_depth)
    else:
        raise TemplateError(f"unknown cell style {style!r}; valid: darts, resnext")
    cell.validate()
    return cell


@dataclass(frozen=True)
class NetworkNode:
    name: str
    scale: int
    width: int
    reduction: bool = False

    @property
    def input_scale(self) -> int:
        return self.scale - 1 if self.reduction else self.scale


@dataclass(frozen=True)
class NetworkTemplate:
    """DAG of cells; node indices are a topological order, node 0 is the source."""

    topology: str
    nodes: tuple[NetworkNode, ...]
    edges: tuple[tuple[int, int], ...]
    stem_strides: int = 2

    @property
    def source(self) -> int:
        return 0

    @property
    def sink(self) -> int:
        return len(self.nodes) - 1

    def predecessors(self, v: int) -> list[int]:
        return sorted(u for u, w in self.edges if w == v)

    def successors(self, u: int) -> list[int]:
        return sorted(w for x, w in self.edges if x == u)

    def in_edges(self, v: int) -> list[int]:
        return [e for e, (_, w) in enumerate(self.edges) if w == v]

    def max_scale(self) -> int:
        return max(n.scale for n in self.nodes)

    def validate(self) -> None:
        n = len(self.nodes)
        if n == 0:
            raise TemplateError("network has no nodes")
        for u, v in self.edges:
            if not 0 <= u < v < n:
                raise TemplateError(f"network edge ({u}, {v}) breaks topological order")
        if len(set(self.edges)) != len(self.edges):
            raise TemplateError("duplicate network edges")
        sources = [v for v in range(n) if not self.predecessors(v)]
        sinks = [v for v in range(n) if not self.successors(v)]
        if sources != [0] or sinks != [n - 1]:
            raise TemplateError(f"network needs exactly one source and one sink, got {sources} / {sinks}")
        for v, node in enumerate(self.nodes):
            for u in self.predecessors(v):
                if node.reduction and self.nodes[u].scale != node.input_scale:
                    raise TemplateError(f"reduction node {node.name} fed from scale {self.nodes[u].scale}")

    def subnetwork(self, keep_edges: Sequence[int]) -> "NetworkTemplate":
        """Restrict to the given edge indices and the nodes they touch."""
        edges = [self.edges[e] for e in sorted(set(keep_edges))]
        keep_nodes = sorted({u for u, _ in edges} | {v for _, v in edges} | {self.source, self.sink})
        remap = {old: new for new, old in enumerate(keep_nodes)}
        sub = NetworkTemplate(
            self.topology,
            tuple(self.nodes[i] for i in keep_nodes),
            tuple((remap[u], remap[v]) for u, v in edges),
            self.stem_strides,
        )
        sub.validate()
        return sub

    def to_dict(self) -> dict:
        return {
            "topology": self.topology,
            "nodes": [asdict(n) for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "stem_strides": self.stem_strides,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkTemplate":
        return cls(d["topology"], tuple(NetworkNode(**n) for n in d["nodes"]),
                   tuple(tuple(e) for e in d["edges"]), d.get("stem_strides", 2))


def build_network_template(topology: str, depth: int, base_channels: int = 16,
                           stem_strides: int = 2) -> NetworkTemplate:
    """Construct the cell-level DAG.

    ``unet``   encoder reductions e1..eD, a bottleneck at the deepest scale and
               decoders dD..d1; decoder d_k sits at scale k-1, takes the previous
               decoder (or bottleneck) and, for k >= 2, the encoder e_{k-1}.
    ``unetpp`` nested grid X(d, k) with d + k < depth; X(d, 0) for d >= 1 are
               reductions, X(d, k) takes X(d, 0..k-1) and X(d+1, k-1).
    ``chain``  ``depth`` normal cells in a line.
    """
    if depth < 1 or (topology != "chain" and depth < 2):
        raise TemplateError(f"depth must be >= 2 for {topology}, got {depth}")

    def width(scale: int) -> int:
        return base_channels * 2 ** scale

    nodes: list[NetworkNode] = []
    edges: list[tuple[int, int]] = []
    if topology == "chain":
        nodes = [NetworkNode(f"c{i}", 0, width(0)) for i in range(depth)]
        edges = [(i, i + 1) for i in range(depth - 1)]
    elif topology == "unet":
        index = {}
        for d in range(1, depth + 1):
            index[f"e{d}"] = len(nodes)
            nodes.append(NetworkNode(f"e{d}", d, width(d), reduction=True))
        index["b"] = len(nodes)
        nodes.append(NetworkNode("b", depth, width(depth)))
        prev = "b"
        for k in range(depth, 0, -1):
            name = f"d{k}"
            index[name] = len(nodes)
            nodes.append(NetworkNode(name, k - 1, width(k - 1)))
            edges.append((index[prev], index[name]))
            if k >= 2:
                edges.append((index[f"e{k - 1}"], index[name]))
            prev = name
        for d in range(1, depth):
            edges.append((index[f"e{d}"], index[f"e{d + 1}"]))
        edges.append((index[f"e{depth}"], index["b"]))
    elif topology == "unetpp":
        order = sorted(((d, k) for d in range(depth) for k in range(depth - d)),
                       key=lambda dk: (dk[0] + dk[1], dk[1]))
        index = {dk: i for i, dk in enumerate(order)}
        for d, k in order:
            nodes.append(NetworkNode(f"x{d}{k}", d, width(d), reduction=(k == 0 and d > 0)))
        for d, k in order:
            v = index[(d, k)]
            if k == 0 and d > 0:
                edges.append((index[(d - 1, 0)], v))
            for j in range(k):
                edges.append((index[(d, j)], v))
            if k > 0:
                edges.append((index[(d + 1, k - 1)], v))
    else:
        raise TemplateError(f"unknown network topology {topology!r}; valid: unet, unetpp, chain")
    net = NetworkTemplate(topology, tuple(nodes), tuple(sorted(edges)), stem_strides)
    net.validate()
    return net


def enumerate_paths(network: NetworkTemplate, cap: int = DEFAULT_PATH_CAP) -> list[tuple[int, ...]]:
    """All source-to-sink paths in lexicographic order of node indices."""
    paths: list[tuple[int, ...]] = []
    succ = {u: network.successors(u) for u in range(len(network.nodes))}

    def walk(u: int, prefix: list[int]) -> None:
        if u == network.sink:
            paths.append(tuple(prefix))
            if len(paths) > cap:
                raise TemplateError(
                    f"more than {cap} source-to-sink paths; use a smaller topology or raise the cap")
            return
        for w in succ[u]:
            prefix.append(w)
            walk(w, prefix)
            prefix.pop()

    walk(network.source, [network.source])
    return paths


def path_edges(network: NetworkTemplate, path: Sequence[int]) -> list[int]:
    lookup = {e: i for i, e in enumerate(network.edges)}
    return [lookup[(u, v)] for u, v in zip(path, path[1:])]


@dataclass(frozen=True)
class Topology:
    cell: CellTemplate
    network: NetworkTemplate
    space: SearchSpace
    name: str = field(default="custom")

    def cell_types(self) -> list[str]:
        kinds = {"reduce" if n.reduction else "normal" for n in self.network.nodes}
        return [k for k in ("normal", "reduce") if k in kinds]

    def to_dict(self) -> dict:
        return {
            "schema": "desknas-topology/1",
            "name": self.name,
            "cell": self.cell.to_dict(),
            "network": self.network.to_dict(),
            "space": {"name": self.space.name, "ops": list(self.space.ops)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        if d.get("schema") != "desknas-topology/1":
            raise TemplateError(f"unsupported topology schema {d.get('schema')!r}")
        return cls(CellTemplate.from_dict(d["cell"]), NetworkTemplate.from_dict(d["network"]),
                   SearchSpace(d["space"]["name"], tuple(d["space"]["ops"])), d.get("name", "custom"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "Topology":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "Topology":
        return cls.loads(Path(path).read_text())


NAMED_TOPOLOGIES = {
    "resnext-unet": ("resnext", "unet", "large"),
    "darts-unet": ("darts", "unet", "base"),
    "darts-unetpp": ("darts", "unetpp", "base"),
    "chain": ("darts", "chain", "base"),
}


def build_topology(name: str, space: str | Sequence[str] | None = None, depth: int = 2,
                   num_blocks: int = 4, base_channels: int = 16, stem_strides: int = 2,
                   towers: int = 4, tower_depth: int = 2) -> Topology:
    try:
        style, net_kind, default_space = NAMED_TOPOLOGIES[name]
    except KeyError:
        raise TemplateError(f"unknown topology {name!r}; valid: {sorted(NAMED_TOPOLOGIES)}") from None
    cell = build_cell_template(style, num_blocks, towers=towers, tower_depth=tower_depth)
    network = build_network_template(net_kind, depth, base_channels, stem_strides)
    return Topology(cell, network, build_operation_space(space or default_space), name)
