"""Discrete architectures decoded from (or sampled over) a topology."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .space import CellTemplate, NetworkTemplate, TemplateError, Topology


class GenotypeError(ValueError):
    pass


@dataclass(frozen=True)
class CellGenotype:
    """Kept cell edges as ``(source, block, op)`` sorted by block then source."""

    edges: tuple[tuple[int, int, str], ...]

    def __post_init__(self):
        edges = ((int(i), int(j), str(op)) for i, j, op in self.edges)
        object.__setattr__(self, "edges", tuple(sorted(edges, key=lambda e: (e[1], e[0]))))

    def inputs_of(self, block: int) -> list[tuple[int, str]]:
        return [(i, op) for i, j, op in self.edges if j == block]

    def ops(self) -> list[str]:
        return [op for _, _, op in self.edges]

    def validate(self, template: CellTemplate, ops: Sequence[str], max_inputs: int | None = None) -> None:
        allowed = set(template.edges)
        seen = set()
        for i, j, op in self.edges:
            if (i, j) not in allowed:
                raise GenotypeError(f"cell edge ({i}, {j}) is not in the template")
            if (i, j) in seen:
                raise GenotypeError(f"duplicate cell edge ({i}, {j})")
            seen.add((i, j))
            if op not in ops:
                raise GenotypeError(f"operation {op!r} is not in the search space")
        for b in template.blocks:
            n = len(self.inputs_of(b))
            if n == 0:
                raise GenotypeError(f"block {b} has no input edge")
            if max_inputs is not None and n > max_inputs:
                raise GenotypeError(f"block {b} has {n} inputs, more than {max_inputs}")
            if template.style == "resnext" and n != 1:
                raise GenotypeError(f"resnext block {b} must keep exactly one input edge")

    def to_list(self) -> list[list]:
        return [[i, j, op] for i, j, op in self.edges]


@dataclass(frozen=True)
class Genotype:
    topology: Topology
    cells: dict[str, CellGenotype]
    network_edges: tuple[int, ...]
    paths: tuple[tuple[int, ...], ...] = field(default=())

    @property
    def network(self) -> NetworkTemplate:
        return self.topology.network.subnetwork(self.network_edges)

    def validate(self, max_inputs: int | None = None) -> None:
        missing = [ct for ct in self.topology.cell_types() if ct not in self.cells]
        if missing:
            raise GenotypeError(f"genotype lacks cell types {missing}")
        for ct in self.topology.cell_types():
            self.cells[ct].validate(self.topology.cell, self.topology.space.ops, max_inputs)
        n_edges = len(self.topology.network.edges)
        if any(not 0 <= e < n_edges for e in self.network_edges):
            raise GenotypeError("network edge index out of range")
        try:
            self.network
        except TemplateError as exc:
            raise GenotypeError(f"kept network is not a single-source single-sink DAG: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "schema": "desknas-genotype/1",
            "topology": self.topology.to_dict(),
            "cells": {ct: cell.to_list() for ct, cell in self.cells.items()},
            "network_edges": list(self.network_edges),
            "paths": [list(p) for p in self.paths],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        if d.get("schema") != "desknas-genotype/1":
            raise GenotypeError(f"unsupported genotype schema {d.get('schema')!r}")
        return cls(
            Topology.from_dict(d["topology"]),
            {ct: CellGenotype(tuple(tuple(e) for e in edges)) for ct, edges in d["cells"].items()},
            tuple(d["network_edges"]),
            tuple(tuple(p) for p in d.get("paths", [])),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Genotype":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def key(self) -> str:
        """Canonical text identifying the architecture (ignores the topology object)."""
        return json.dumps({"cells": {ct: c.to_list() for ct, c in sorted(self.cells.items())},
                           "net": list(self.network_edges)}, sort_keys=True)


def full_network_edges(topology: Topology) -> tuple[int, ...]:
    return tuple(range(len(topology.network.edges)))
