"""Discrete evolutionary search: an orchestrator, a simulated worker pool and a History.

Workers are in-process execution contexts. They only see :class:`JobMessage`
objects and only answer with :class:`ResultMessage` objects, so a networked
transport could replace :func:`_run_context` without touching the loop.
Context 0 is the orchestrator itself, which takes its share of the jobs.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .genotype import CellGenotype, Genotype, full_network_edges
from .memory import estimate_memory
from .space import CellTemplate, SearchSpace, Topology

log = logging.getLogger(__name__)

DARTS_INPUTS_PER_BLOCK = 2
STATUS_OK = "ok"
STATUS_FAILED = "failed"
STATUS_REJECTED = "rejected-memory"


# -- sampling and mutation -------------------------------------------------

def sample_random_cell(template: CellTemplate, space: SearchSpace | Sequence[str], rng: np.random.Generator,
                       inputs_per_block: int | None = DARTS_INPUTS_PER_BLOCK) -> CellGenotype:
    """Uniform op per kept edge, drawn independently with replacement.

    DARTS blocks keep ``inputs_per_block`` distinct inputs chosen uniformly
    (``None`` keeps every template edge); ResNeXt cells keep all edges.
    """
    ops = list(space.ops if isinstance(space, SearchSpace) else space)
    edges = []
    for b in template.blocks:
        sources = [template.edges[e][0] for e in template.in_edges(b)]
        if template.style == "darts" and inputs_per_block is not None and len(sources) > inputs_per_block:
            sources = sorted(rng.choice(sources, size=inputs_per_block, replace=False).tolist())
        for i in sources:
            edges.append((int(i), b, ops[int(rng.integers(len(ops)))]))
    return CellGenotype(tuple(edges))


def sample_random_genotype(topology: Topology, rng: np.random.Generator) -> Genotype:
    cells = {ct: sample_random_cell(topology.cell, topology.space, rng) for ct in topology.cell_types()}
    return Genotype(topology, cells, full_network_edges(topology))


def mutate_cell(cell: CellGenotype, template: CellTemplate, ops: Sequence[str], rng: np.random.Generator,
                rate: float, topology_rate: float | None = None) -> CellGenotype:
    """Per edge, with probability ``rate``, switch to a different op; then, with
    probability ``topology_rate`` (default ``rate``), rewire one edge's source."""
    if not 0 <= rate <= 1:
        raise ValueError(f"mutation rate must lie in [0, 1], got {rate}")
    topology_rate = rate if topology_rate is None else topology_rate
    edges = [list(e) for e in cell.edges]
    for e in edges:
        if len(ops) > 1 and rng.random() < rate:
            others = [o for o in ops if o != e[2]]
            e[2] = others[int(rng.integers(len(others)))]
    if edges and rng.random() < topology_rate:
        e = edges[int(rng.integers(len(edges)))]
        taken = {i for i, j, _ in edges if j == e[1]}
        free = [template.edges[k][0] for k in template.in_edges(e[1]) if template.edges[k][0] not in taken]
        if free:
            e[0] = free[int(rng.integers(len(free)))]
    return CellGenotype(tuple(tuple(e) for e in edges))


def mutate(genotype: Genotype, rng: np.random.Generator, rate: float,
           topology_rate: float | None = None) -> Genotype:
    topo = genotype.topology
    cells = {ct: mutate_cell(cell, topo.cell, topo.space.ops, rng, rate, topology_rate)
             for ct, cell in sorted(genotype.cells.items())}
    return Genotype(topo, cells, genotype.network_edges, genotype.paths)


# -- messages and records --------------------------------------------------

@dataclass(frozen=True)
class JobMessage:
    id: int
    genotype: Genotype
    budget: int
    seed: int


@dataclass(frozen=True)
class ResultMessage:
    id: int
    fitness: float | None
    status: str
    worker: int = 0
    wall_time: float = 0.0
    attempts: int = 1


@dataclass
class Individual:
    id: int
    genotype: Genotype
    age: int                          # generation of birth
    fitness: float | None = None
    parent: int | None = None

    def __post_init__(self):
        if self.fitness is not None and not 0 <= self.fitness <= 1:
            raise ValueError(f"fitness must lie in [0, 1], got {self.fitness}")


def _genotype_record(g: Genotype) -> dict:
    return {"cells": {ct: c.to_list() for ct, c in sorted(g.cells.items())}, "network_edges": list(g.network_edges)}


def genotype_from_record(topology: Topology, rec: dict) -> Genotype:
    cells = {ct: CellGenotype(tuple(tuple(e) for e in edges)) for ct, edges in rec["cells"].items()}
    return Genotype(topology, cells, tuple(rec["network_edges"]))


class History:
    """Append-only evaluation log; one JSON object per line on disk."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.records: list[dict] = []
        self._ids: set[int] = set()
        self.path = Path(path) if path is not None else None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: dict) -> None:
        if record["id"] in self._ids:
            raise ValueError(f"individual {record['id']} already recorded")
        self._ids.add(record["id"])
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def normalized(self) -> list[dict]:
        """Records sorted by id without timing and placement fields."""
        drop = {"wall_time", "worker"}
        return [{k: v for k, v in r.items() if k not in drop} for r in sorted(self.records, key=lambda r: r["id"])]

    @staticmethod
    def read_jsonl(path) -> list[dict]:
        out = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                out.append(json.loads(line))
        return out


# -- workers ---------------------------------------------------------------

FitnessFn = Callable[[JobMessage], float]


def _execute(job: JobMessage, fitness_fn: FitnessFn, context: int) -> ResultMessage:
    start = time.perf_counter()
    for attempt in (1, 2):
        try:
            fitness = float(fitness_fn(job))
            if not 0 <= fitness <= 1:
                raise ValueError(f"fitness {fitness} outside [0, 1]")
            return ResultMessage(job.id, fitness, STATUS_OK, context, time.perf_counter() - start, attempt)
        except Exception as exc:  # noqa: BLE001 - any worker failure is reported, not raised
            log.warning("job %d failed on context %d (attempt %d): %s", job.id, context, attempt, exc)
    return ResultMessage(job.id, None, STATUS_FAILED, context, time.perf_counter() - start, 2)


def _run_context(context: int, jobs: list[JobMessage], fitness_fn: FitnessFn) -> list[ResultMessage]:
    return [_execute(job, fitness_fn, context) for job in jobs]


def dispatch(jobs: list[JobMessage], fitness_fn: FitnessFn, workers: int,
             trace: list[tuple] | None = None) -> dict[int, ResultMessage]:
    """Round-robin jobs over ``workers`` contexts and collect one result per job."""
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    queues: list[list[JobMessage]] = [[] for _ in range(workers)]
    for k, job in enumerate(jobs):
        queues[k % workers].append(job)
        if trace is not None:
            trace.append(("job", job.id, k % workers))
    if workers == 1:
        batches = [_run_context(0, queues[0], fitness_fn)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_context, c, q, fitness_fn) for c, q in enumerate(queues)]
            batches = [f.result() for f in futures]
    results = {}
    for batch in batches:
        for res in batch:
            if trace is not None:
                trace.append(("result", res.id, res.worker, res.status))
            results[res.id] = res
    return results


# -- orchestrator ----------------------------------------------------------

@dataclass
class EvolutionConfig:
    pop_size: int = 8
    generations: int = 5
    workers: int = 1
    mutation_rate: float = 0.2
    topology_rate: float | None = None
    aging_fraction: float = 0.25
    tournament_size: int = 3
    elitism: bool = True
    seed: int = 0
    budget: int = 10                          # training epochs per candidate
    memory_budget: int | None = None          # bytes; None disables the guard
    input_shape: tuple[int, int, int] = (1, 64, 64)
    batch: int = 2

    def validate(self) -> None:
        if self.pop_size < 2:
            raise ValueError(f"pop_size must be >= 2, got {self.pop_size}")
        if self.generations < 1:
            raise ValueError(f"generations must be >= 1, got {self.generations}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if not 0 <= self.mutation_rate <= 1 or not 0 <= self.aging_fraction <= 1:
            raise ValueError("mutation_rate and aging_fraction must lie in [0, 1]")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be >= 1")


@dataclass
class EvolutionResult:
    history: History
    population: list[Individual]
    population_best: list[float | None]        # best population fitness after each generation
    trace: list[tuple] = field(default_factory=list)
    removed_by_aging: list[list[int]] = field(default_factory=list)


def _rank_key(ind: Individual):
    return (-(ind.fitness if ind.fitness is not None else -math.inf), ind.id)


def tournament(population: Sequence[Individual], rng: np.random.Generator, size: int = 3) -> Individual:
    pool = [p for p in population if p.fitness is not None] or list(population)
    picks = rng.choice(len(pool), size=min(size, len(pool)), replace=False)
    return min((pool[int(i)] for i in picks), key=_rank_key)


def _complete_generations(records: list[dict], pop_size: int) -> list[dict]:
    """Records of the leading generations that were fully written."""
    kept, g = [], 0
    while True:
        rows = [r for r in records if r["generation"] == g]
        if len(rows) != pop_size:
            return kept
        kept.extend(rows)
        g += 1


def run_evolution(config: EvolutionConfig, topology: Topology, fitness_fn: FitnessFn,
                  history_path: str | os.PathLike | None = None, resume: bool = False) -> EvolutionResult:
    """Generational evolution with tournament selection, mutation and aging.

    Each generation breeds ``pop_size`` children. Before the next population
    is formed, the ``floor(aging_fraction * pop_size)`` oldest members are
    removed; the survivors and the evaluated children then compete on fitness.
    With elitism, a removed best individual returns as a clone with a new id
    and its inherited fitness (it is not re-evaluated).

    Everything random is drawn from ``(seed, generation)`` streams, and a job's
    seed depends only on the run seed and the individual id, so the History
    does not depend on the worker count. ``resume`` replays the run, reusing
    results of the complete generations already present in ``history_path``.
    """
    config.validate()
    cached: dict[int, dict] = {}
    if history_path is not None:
        path = Path(history_path)
        if resume and path.exists():
            kept = _complete_generations(History.read_jsonl(path), config.pop_size)
            cached = {r["id"]: r for r in kept}
            path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))
        elif path.exists():
            path.unlink()
    history = History(history_path)
    for r in sorted(cached.values(), key=lambda r: r["id"]):
        history.records.append(r)
        history._ids.add(r["id"])
    trace: list[tuple] = []
    next_id = 0

    def evaluate(generation: int, members: list[Individual]) -> None:
        jobs = []
        for ind in members:
            job_seed = int(np.random.SeedSequence([config.seed, ind.id]).generate_state(1)[0])
            if ind.id in cached:
                rec = cached[ind.id]
                if rec["genotype"] != _genotype_record(ind.genotype):
                    raise RuntimeError(f"resume mismatch for individual {ind.id}")
                ind.fitness = rec["fitness"]
                continue
            if config.memory_budget is not None:
                est = estimate_memory(ind.genotype, config.input_shape, config.batch).total
                if est > config.memory_budget:
                    trace.append(("rejected", ind.id, est))
                    _record(generation, ind, ResultMessage(ind.id, None, STATUS_REJECTED, -1, 0.0, 0))
                    continue
            jobs.append(JobMessage(ind.id, ind.genotype, config.budget, job_seed))
        results = dispatch(jobs, fitness_fn, config.workers, trace)
        by_id = {ind.id: ind for ind in members}
        for job in jobs:   # record in job order, independent of completion order
            res = results[job.id]
            by_id[job.id].fitness = res.fitness
            _record(generation, by_id[job.id], res)

    def _record(generation: int, ind: Individual, res: ResultMessage) -> None:
        history.append({"generation": generation, "id": ind.id, "parent": ind.parent,
                        "genotype": _genotype_record(ind.genotype), "fitness": res.fitness,
                        "status": res.status, "worker": res.worker, "wall_time": round(res.wall_time, 6)})

    rng = np.random.default_rng([config.seed, 0])
    population = []
    for _ in range(config.pop_size):
        population.append(Individual(next_id, sample_random_genotype(topology, rng), 0))
        next_id += 1
    evaluate(0, population)
    best = [max((p.fitness for p in population if p.fitness is not None), default=None)]
    removed_log: list[list[int]] = []
    n_age = int(math.floor(config.aging_fraction * config.pop_size))

    for gen in range(1, config.generations):
        rng = np.random.default_rng([config.seed, gen])
        children = []
        for _ in range(config.pop_size):
            parent = tournament(population, rng, config.tournament_size)
            child = mutate(parent.genotype, rng, config.mutation_rate, config.topology_rate)
            children.append(Individual(next_id, child, gen, parent=parent.id))
            next_id += 1
        evaluate(gen, children)
        oldest = sorted(population, key=lambda p: (p.age, p.id))[:n_age]
        removed = {p.id for p in oldest}
        removed_log.append(sorted(removed))
        survivors = [p for p in population if p.id not in removed]
        ranked = sorted(survivors + [c for c in children if c.fitness is not None], key=_rank_key)
        new_pop = ranked[: config.pop_size]
        elite = min(population, key=_rank_key)
        if config.elitism and elite.fitness is not None:
            top = max((p.fitness for p in new_pop if p.fitness is not None), default=-math.inf)
            if top < elite.fitness:
                clone = Individual(next_id, elite.genotype, gen, elite.fitness, parent=elite.id)
                next_id += 1
                new_pop = ([clone] + new_pop)[: config.pop_size]
        if len(new_pop) < config.pop_size:
            # failed children leave gaps; keep the best of the rest so the size stays fixed
            rest = sorted([c for c in children if c not in new_pop], key=_rank_key)
            new_pop += rest[: config.pop_size - len(new_pop)]
        population = new_pop
        best.append(max((p.fitness for p in population if p.fitness is not None), default=None))
        log.info("generation %d best %.4f", gen, best[-1] if best[-1] is not None else float("nan"))
    return EvolutionResult(history, population, best, trace, removed_log)


def run_random_search(topology: Topology, n_samples: int, fitness_fn: FitnessFn, seed: int = 0,
                      workers: int = 1, budget: int = 10) -> tuple[list[Genotype], list[ResultMessage]]:
    """Evaluate ``n_samples`` uniformly sampled genotypes."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    rng = np.random.default_rng([seed, 0])
    genotypes = [sample_random_genotype(topology, rng) for _ in range(n_samples)]
    jobs = [JobMessage(i, g, budget, int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
            for i, g in enumerate(genotypes)]
    results = dispatch(jobs, fitness_fn, workers)
    return genotypes, [results[i] for i in range(n_samples)]


def surrogate_fitness(job: JobMessage) -> float:
    """Cheap deterministic stand-in: share of parameterized ops, plus seeded jitter."""
    ops = [op for cell in job.genotype.cells.values() for op in cell.ops()]
    free = {"skip", "cut", "avg_pool_3x3", "max_pool_3x3"}
    share = sum(op not in free for op in ops) / max(len(ops), 1)
    jitter = np.random.default_rng(job.seed).uniform(0, 0.05)
    return float(min(1.0, 0.9 * share + jitter))

