import json
import threading
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from desknas.evolution import (
    STATUS_FAILED,
    STATUS_OK,
    STATUS_REJECTED,
    EvolutionConfig,
    History,
    Individual,
    JobMessage,
    dispatch,
    genotype_from_record,
    mutate,
    mutate_cell,
    run_evolution,
    run_random_search,
    sample_random_cell,
    sample_random_genotype,
    surrogate_fitness,
    tournament,
)
from desknas.genotype import CellGenotype
from desknas.memory import estimate_memory
from desknas.space import build_topology

CHAIN = build_topology("chain", depth=2, num_blocks=3, base_channels=4, stem_strides=1)
DARTS = build_topology("darts-unet")


def test_rate_zero_is_identity():
    rng = np.random.default_rng(0)
    g = sample_random_genotype(DARTS, rng)
    for _ in range(50):
        assert mutate(g, rng, 0.0).cells == g.cells


def test_single_edge_op_flips_at_rate_one():
    topo = build_topology("resnext-unet", space=["skip", "cut"], towers=1, tower_depth=1)
    assert len(topo.cell.edges) == 1
    (i, j) = topo.cell.edges[0]
    cell = CellGenotype(((i, j, "skip"),))
    rng = np.random.default_rng(1)
    assert mutate_cell(cell, topo.cell, topo.space.ops, rng, 1.0).edges == ((i, j, "cut"),)


def test_single_op_space_cannot_change_op():
    topo = build_topology("chain", space=["skip"], num_blocks=3)
    rng = np.random.default_rng(2)
    cell = sample_random_cell(topo.cell, topo.space, rng)
    assert set(cell.ops()) == {"skip"}
    assert set(mutate_cell(cell, topo.cell, topo.space.ops, rng, 1.0).ops()) == {"skip"}


def test_mutation_rate_is_validated():
    cell = sample_random_cell(DARTS.cell, DARTS.space, np.random.default_rng(0))
    with pytest.raises(ValueError):
        mutate_cell(cell, DARTS.cell, DARTS.space.ops, np.random.default_rng(0), 1.5)


@pytest.mark.parametrize("name", ["darts-unet", "resnext-unet"])
def test_long_mutation_chains_stay_valid(name):
    topo = build_topology(name)
    rng = np.random.default_rng(3)
    g = sample_random_genotype(topo, rng)
    max_inputs = 2 if topo.cell.style == "darts" else None
    for _ in range(10_000):
        g = mutate(g, rng, 0.3)
        for cell in g.cells.values():
            cell.validate(topo.cell, topo.space.ops, max_inputs)
    g.validate(max_inputs)


def test_sampled_ops_are_uniform():
    rng = np.random.default_rng(4)
    ops = Counter()
    n = 0
    for _ in range(2000):
        cell = sample_random_cell(DARTS.cell, DARTS.space, rng)
        ops.update(cell.ops())
        n += len(cell.edges)
    p = 1 / len(DARTS.space)
    sigma = np.sqrt(n * p * (1 - p))
    for op in DARTS.space.ops:
        assert abs(ops[op] - n * p) < 5 * sigma


def test_sampled_darts_blocks_keep_two_distinct_inputs():
    rng = np.random.default_rng(5)
    for _ in range(200):
        cell = sample_random_cell(DARTS.cell, DARTS.space, rng)
        for b in DARTS.cell.blocks:
            srcs = cell.inputs_of(b)
            assert len(srcs) == min(2, len(DARTS.cell.in_edges(b))) and len(set(srcs)) == len(srcs)


def test_individual_fitness_range():
    g = sample_random_genotype(CHAIN, np.random.default_rng(0))
    with pytest.raises(ValueError):
        Individual(0, g, 0, fitness=1.5)


def test_tournament_picks_fittest_of_sample():
    g = sample_random_genotype(CHAIN, np.random.default_rng(0))
    pop = [Individual(i, g, 0, fitness=f) for i, f in enumerate([0.1, 0.9, 0.5])]
    assert tournament(pop, np.random.default_rng(0), 3).id == 1


def test_history_rejects_duplicate_ids(tmp_path):
    h = History(tmp_path / "h.jsonl")
    h.append({"id": 1, "generation": 0})
    with pytest.raises(ValueError):
        h.append({"id": 1, "generation": 0})
    assert History.read_jsonl(tmp_path / "h.jsonl") == [{"generation": 0, "id": 1}]


def test_genotype_record_round_trip(tmp_path):
    res = run_evolution(EvolutionConfig(pop_size=3, generations=1), CHAIN, surrogate_fitness, tmp_path / "h.jsonl")
    rec = History.read_jsonl(tmp_path / "h.jsonl")[0]
    genotype_from_record(CHAIN, rec["genotype"]).validate()
    assert len(res.history) == 3


@pytest.mark.parametrize("pop,gens", [(4, 1), (4, 3), (5, 2)])
def test_history_holds_one_record_per_evaluated_child(pop, gens):
    res = run_evolution(EvolutionConfig(pop_size=pop, generations=gens), CHAIN, surrogate_fitness)
    assert len(res.history) == pop * gens
    assert Counter(r["generation"] for r in res.history.records) == {g: pop for g in range(gens)}


def test_history_does_not_depend_on_worker_count():
    cfg = dict(pop_size=6, generations=3, seed=7)
    h1 = run_evolution(EvolutionConfig(workers=1, **cfg), CHAIN, surrogate_fitness).history.normalized()
    h4 = run_evolution(EvolutionConfig(workers=4, **cfg), CHAIN, surrogate_fitness).history.normalized()
    assert h1 == h4


@settings(max_examples=20)
@given(pop=st.integers(2, 6), gens=st.integers(2, 4), age=st.sampled_from([0.0, 0.25, 0.5, 1.0]),
       seed=st.integers(0, 1000))
def test_elitism_and_aging_invariants(pop, gens, age, seed):
    cfg = EvolutionConfig(pop_size=pop, generations=gens, aging_fraction=age, seed=seed, elitism=True)
    res = run_evolution(cfg, CHAIN, surrogate_fitness)
    best = res.population_best
    assert all(b >= a for a, b in zip(best, best[1:]))
    assert len(res.population) == pop
    n_age = int(np.floor(age * pop))
    assert all(len(r) == n_age for r in res.removed_by_aging)
    # an individual removed by aging never comes back under its own id
    removed = {i for r in res.removed_by_aging for i in r}
    assert not removed & {p.id for p in res.population}


def test_trace_audit():
    trace = []
    jobs = [JobMessage(i, sample_random_genotype(CHAIN, np.random.default_rng(i)), 1, i) for i in range(10)]
    results = dispatch(jobs, surrogate_fitness, 3, trace)
    sent = [t for t in trace if t[0] == "job"]
    got = [t for t in trace if t[0] == "result"]
    assert sorted(t[1] for t in sent) == sorted(t[1] for t in got) == list(range(10))
    where = {t[1]: t[2] for t in sent}
    assert all(where[t[1]] == t[2] for t in got)
    assert {t[2] for t in sent} == {0, 1, 2}
    assert all(r.status == STATUS_OK for r in results.values())


def test_failed_job_is_retried_once():
    calls = Counter()
    lock = threading.Lock()

    def flaky(job):
        with lock:
            calls[job.id] += 1
            n = calls[job.id]
        if job.id == 1 and n == 1:
            raise RuntimeError("transient")
        if job.id == 2:
            raise RuntimeError("permanent")
        return 0.5

    jobs = [JobMessage(i, sample_random_genotype(CHAIN, np.random.default_rng(i)), 1, i) for i in range(4)]
    res = dispatch(jobs, flaky, 2)
    assert res[1].status == STATUS_OK and res[1].attempts == 2
    assert res[2].status == STATUS_FAILED and res[2].fitness is None and calls[2] == 2
    assert calls[0] == calls[3] == 1


def test_run_survives_failing_candidates():
    def bad_sometimes(job):
        if job.id % 3 == 0:
            raise RuntimeError("boom")
        return surrogate_fitness(job)

    res = run_evolution(EvolutionConfig(pop_size=4, generations=3, workers=2), CHAIN, bad_sometimes)
    statuses = {r["id"]: r["status"] for r in res.history.records}
    assert all((s == STATUS_FAILED) == (i % 3 == 0) for i, s in statuses.items())
    assert len(res.population) == 4


def test_out_of_fraction_fitness_counts_as_failure():
    res = dispatch([JobMessage(0, sample_random_genotype(CHAIN, np.random.default_rng(0)), 1, 0)],
                   lambda job: 1.5, 1)
    assert res[0].status == STATUS_FAILED


def test_memory_guard_rejects_before_training():
    rng = np.random.default_rng(0)
    ests = [estimate_memory(sample_random_genotype(DARTS, rng), (1, 32, 32), 2).total for _ in range(8)]
    budget = int(np.median(ests))
    called = []

    def fitness(job):
        called.append(job.id)
        return surrogate_fitness(job)

    cfg = EvolutionConfig(pop_size=6, generations=2, memory_budget=budget, input_shape=(1, 32, 32), batch=2)
    res = run_evolution(cfg, DARTS, fitness)
    for rec in res.history.records:
        g = genotype_from_record(DARTS, rec["genotype"])
        over = estimate_memory(g, (1, 32, 32), 2).total > budget
        assert (rec["status"] == STATUS_REJECTED) == over
        assert (rec["id"] in called) == (not over)
    assert any(r["status"] == STATUS_REJECTED for r in res.history.records)


def test_resume_after_partial_generation(tmp_path):
    cfg = EvolutionConfig(pop_size=4, generations=4, seed=11)
    full = run_evolution(cfg, CHAIN, surrogate_fitness, tmp_path / "full.jsonl")
    lines = (tmp_path / "full.jsonl").read_text().splitlines()
    crashed = tmp_path / "crashed.jsonl"
    crashed.write_text("\n".join(lines[:10]) + "\n")       # two generations and half of the third
    calls = []

    def counting(job):
        calls.append(job.id)
        return surrogate_fitness(job)

    resumed = run_evolution(cfg, CHAIN, counting, crashed, resume=True)
    assert resumed.history.normalized() == full.history.normalized()
    assert len(calls) == 8
    on_disk = [json.loads(line) for line in crashed.read_text().splitlines()]
    assert sorted(r["id"] for r in on_disk) == sorted(r["id"] for r in full.history.records)


def test_fresh_run_overwrites_history(tmp_path):
    p = tmp_path / "h.jsonl"
    run_evolution(EvolutionConfig(pop_size=2, generations=2), CHAIN, surrogate_fitness, p)
    run_evolution(EvolutionConfig(pop_size=2, generations=2), CHAIN, surrogate_fitness, p)
    assert len(History.read_jsonl(p)) == 4


@pytest.mark.parametrize("bad", [dict(pop_size=1), dict(generations=0), dict(workers=0),
                                 dict(mutation_rate=-0.1), dict(aging_fraction=2.0), dict(tournament_size=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        run_evolution(EvolutionConfig(**bad), CHAIN, surrogate_fitness)


def test_random_search_is_seeded():
    g1, r1 = run_random_search(CHAIN, 4, surrogate_fitness, seed=3)
    g2, r2 = run_random_search(CHAIN, 4, surrogate_fitness, seed=3, workers=2)
    assert [g.cells for g in g1] == [g.cells for g in g2]
    assert [r.fitness for r in r1] == [r.fitness for r in r2]
    with pytest.raises(ValueError):
        run_random_search(CHAIN, 0, surrogate_fitness)
