"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import contextlib
import csv
import itertools
import json
import time

import numpy as np
import pytest

from desknas.arch_optim import entropy, gaea_step, softmax_alpha_step
from desknas.config import RunConfig
from desknas.data import DatasetConfig
from desknas.decoder import (
    decode_cell_topk,
    edge_log_probs,
    gaussian_cutoff,
    multipath_decode,
    viterbi_best_path,
)
from desknas.evolution import (
    EvolutionConfig,
    JobMessage,
    dispatch,
    run_evolution,
    sample_random_genotype,
    surrogate_fitness,
)
from desknas.genotype import CellGenotype, Genotype, full_network_edges
from desknas.metrics import mean_iou, weighted_cross_entropy
from desknas.pipeline import (
    cmd_decode,
    cmd_random_baseline,
    cmd_report,
    cmd_retrain,
    cmd_search,
    make_splits,
    read_manifest,
    write_stage,
)
from desknas.space import NetworkTemplate, build_cell_template, build_network_template, build_topology, enumerate_paths, path_edges
from desknas.supernet import ChannelMask, channel_subset, mixed_op_forward, partial_channel_forward
from desknas.tensor import functional as F
from desknas.tensor.core import (
    Tensor,
    add,
    concat,
    div,
    exp,
    log,
    log_softmax,
    mean,
    mul,
    precision,
    relu,
    reshape,
    softmax,
    stack,
    sub,
    take,
    tsum,
    weighted_sum,
)
from desknas.tensor.gradcheck import check_gradients
from desknas.tensor.layers import OPS, build_op

BASE = ("dil_conv_3x3", "dil_conv_5x5", "sep_conv_3x3", "sep_conv_5x5",
        "avg_pool_3x3", "max_pool_3x3", "skip", "cut")


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(number: int, title: str):
        start = time.perf_counter()
        notes: list[str] = []
        try:
            yield notes
        except BaseException as exc:
            with capsys.disabled():
                print(f"\ncriterion {number} FAIL {title}: {type(exc).__name__}: {exc}"[:400])
            raise
        with capsys.disabled():
            extra = f" [{'; '.join(notes)}]" if notes else ""
            print(f"\ncriterion {number} PASS {title} ({time.perf_counter() - start:.1f}s){extra}")
    return run


# -- 1: gradients ----------------------------------------------------------------

def _leaf(rng, *shape, positive=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True, dtype=np.float64)


CORE = {
    "add": lambda a, b: add(a, b),
    "sub": lambda a, b: sub(a, b),
    "mul": lambda a, b: mul(a, b),
    "div": lambda a, b: div(a, b),
    "exp": lambda a, b: exp(a),
    "log": lambda a, b: log(b),
    "relu": lambda a, b: relu(a),
    "sum": lambda a, b: tsum(a, axis=0),
    "mean": lambda a, b: mean(a, axis=1),
    "reshape": lambda a, b: reshape(a, (6, 2)),
    "getitem": lambda a, b: a[1:, ::2],
    "take": lambda a, b: take(a, np.array([2, 0, 2]), 1),
    "concat": lambda a, b: concat([a, b], axis=0),
    "stack": lambda a, b: stack([a, b], axis=1),
    "softmax": lambda a, b: softmax(a, axis=1),
    "log_softmax": lambda a, b: log_softmax(a, axis=0),
    "weighted_sum": lambda a, b: weighted_sum(softmax(tsum(a, axis=1)), [b, a, b]),
}

SPATIAL = {
    "conv2d": lambda x, w: F.conv2d(x, w, stride=2, padding=1),
    "conv2d_dilated": lambda x, w: F.conv2d(x, w, padding=2, dilation=2),
    "conv2d_depthwise": lambda x, w: F.conv2d(x, w[:2, :1], padding=1, groups=2),
    "max_pool2d": lambda x, w: F.max_pool2d(x, 3, 1, 1),
    "avg_pool2d": lambda x, w: F.avg_pool2d(x, 3, 2, 1),
    "instance_norm": lambda x, w: F.instance_norm(x),
    "subsample": lambda x, w: F.subsample(x, 2),
    "upsample_nearest": lambda x, w: F.upsample_nearest(x, 2),
    "downsample_avg": lambda x, w: F.downsample_avg(x, 2),
    "resize_bilinear": lambda x, w: F.resize_bilinear(x, (7, 9)),
}


def _probe_loss(fn, seed):
    probe = None

    def loss():
        nonlocal probe
        out = fn()
        if probe is None:
            probe = np.random.default_rng(seed).normal(size=out.shape)
        return tsum(mul(out, probe))
    return loss


def test_criterion_1_gradient_suite(criterion):
    with criterion(1, "finite-difference gradients, 20 seeds, rel err < 1e-4"):
        start = time.perf_counter()
        worst = {}
        with precision(np.float64):
            for seed in range(20):
                rng = np.random.default_rng(seed)
                for name, fn in CORE.items():
                    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4, positive=True)
                    err = check_gradients(_probe_loss(lambda: fn(a, b), seed), [a, b], eps=1e-5)
                    worst[name] = max(worst.get(name, 0.0), err)
                for name, fn in SPATIAL.items():
                    x, w = _leaf(rng, 1, 2, 6, 6), _leaf(rng, 3, 2, 3, 3)
                    used = [x, w] if name.startswith("conv") else [x]
                    err = check_gradients(_probe_loss(lambda: fn(x, w), seed), used, eps=1e-5)
                    worst[name] = max(worst.get(name, 0.0), err)
                for kind in sorted(OPS):
                    op = build_op(kind, 2, 1 + seed % 2, rng)
                    x = _leaf(rng, 1, 2, 5, 5)
                    err = check_gradients(_probe_loss(lambda: op(x), seed), [x, *op.parameters()], eps=1e-5)
                    worst[f"op:{kind}"] = max(worst.get(f"op:{kind}", 0.0), err)
                logits = _leaf(rng, 2, 2, 3, 3)
                mask = rng.integers(0, 2, size=(2, 3, 3))
                err = check_gradients(lambda: weighted_cross_entropy(logits, mask), [logits], eps=1e-5)
                worst["weighted_cross_entropy"] = max(worst.get("weighted_cross_entropy", 0.0), err)
        elapsed = time.perf_counter() - start
        bad = {k: v for k, v in worst.items() if not v < 1e-4}
        assert not bad, bad
        assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"


# -- 2: relaxation ---------------------------------------------------------------

def test_criterion_2_relaxation_equivalences(criterion):
    with criterion(2, "mixed op oracle, K=1 bitwise, mask expectation"):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(size=(2, 4, 6, 6)).astype(np.float32))
            ops = [build_op(k, 4, 1, rng) for k in ("sep_conv_3x3", "dil_conv_3x3", "max_pool_3x3", "skip", "cut")]
            alpha = rng.normal(size=len(ops))
            w = np.exp(alpha - alpha.max())
            w /= w.sum()
            expected = sum(w[i] * ops[i](x).data.astype(np.float64) for i in range(len(ops)))
            got = mixed_op_forward(x, Tensor(alpha), ops).data
            np.testing.assert_allclose(got, expected, rtol=1e-6, atol=1e-6)
            a = partial_channel_forward(x, Tensor(alpha), ops, 1, rng).data
            assert a.tobytes() == got.tobytes()
        rng = np.random.default_rng(3)
        c, k = 4, 2
        kinds = ("avg_pool_3x3", "max_pool_3x3", "skip", "cut")
        x = Tensor(rng.normal(size=(1, c, 5, 5)))
        part = [build_op(kd, channel_subset(c, k), 1, rng) for kd in kinds]
        alpha = Tensor(rng.normal(size=4))
        outs = []
        for chosen in itertools.combinations(range(c), channel_subset(c, k)):
            m = np.zeros(c, dtype=bool)
            m[list(chosen)] = True
            outs.append(partial_channel_forward(x, alpha, part, k, mask=ChannelMask("e", m, k)).data)
        full = mixed_op_forward(x, alpha, [build_op(kd, c, 1, rng) for kd in kinds]).data
        p = channel_subset(c, k) / c
        np.testing.assert_allclose(np.mean(outs, axis=0), p * full + (1 - p) * x.data, rtol=1e-6, atol=1e-6)


# -- 3: GAEA ---------------------------------------------------------------------

def _toy_entropy(theta_mode: bool, steps: int = 100, lr: float = 0.1) -> float:
    c = np.array([0.3, 0.0])
    w = np.array([0.5, 0.5]) if theta_mode else np.zeros(2)
    for _ in range(steps):
        if theta_mode:
            w = gaea_step(w, c, lr)
        else:
            p = np.exp(w) / np.exp(w).sum()
            w = softmax_alpha_step(w, p * (c - p @ c), lr)
    return entropy(w if theta_mode else np.exp(w) / np.exp(w).sum())


def test_criterion_3_gaea(criterion):
    with criterion(3, "simplex over 10k steps, hand example, toy entropy"):
        rng = np.random.default_rng(0)
        theta = np.full(8, 1 / 8)
        for _ in range(10_000):
            theta = gaea_step(theta, rng.normal(scale=rng.uniform(0.01, 100), size=8), rng.uniform(0.01, 1.0))
            assert abs(theta.sum() - 1.0) <= 1e-9 and np.all(theta >= 0)
        np.testing.assert_allclose(gaea_step(np.array([0.5, 0.5]), np.array([1.0, 0.0]), 0.1),
                                   [0.47502081252106, 0.52497918747894], atol=1e-12)
        assert _toy_entropy(True) < _toy_entropy(False)


# -- 4: decoder ------------------------------------------------------------------

def test_criterion_4_decoder_oracles(criterion):
    with criterion(4, "Viterbi vs enumeration, top-2 inputs, cutoff examples"):
        for kind, depth in (("unet", 3), ("unetpp", 3), ("unetpp", 4), ("unetpp", 5)):
            net = build_network_template(kind, depth)
            paths = enumerate_paths(net)
            assert len(paths) <= 200
            rng = np.random.default_rng(depth)
            for _ in range(50):
                beta = rng.normal(scale=2.0, size=len(net.edges))
                logp = edge_log_probs(beta, net)
                best = max(float(sum(logp[e] for e in path_edges(net, p))) for p in paths)
                assert viterbi_best_path(beta, net).score == pytest.approx(best, abs=1e-12)
        cell = build_cell_template("darts", 4)
        rng = np.random.default_rng(1)
        for _ in range(50):
            g = decode_cell_topk(cell, rng.normal(size=(14, 8)), BASE, 2, rng.normal(size=14))
            assert all(len(g.inputs_of(b)) <= 2 for b in cell.blocks)
        assert gaussian_cutoff([0.0, 1.0]) == (0.5, 0.5, 2.0)
        nodes = tuple(build_network_template("chain", 4).nodes)
        diamond = NetworkTemplate("custom", nodes, ((0, 1), (0, 2), (1, 3), (2, 3)))
        kept, _ = multipath_decode(np.array([0.0, 0.0, 3.0, 0.0]), diamond)
        assert [k.path for k in kept] == [(0, 1, 3)]           # nothing clears the cutoff: fallback
        net = build_network_template("unetpp", 3)
        names = [n.name for n in net.nodes]
        route = tuple(names.index(n) for n in ("x00", "x10", "x20", "x11", "x02"))
        beta = np.zeros(len(net.edges))
        beta[path_edges(net, route)] = 5.0
        kept, _ = multipath_decode(beta, net)
        assert [k.path for k in kept] == [route]


# -- 5: end-to-end smoke -------------------------------------------------------------

SMOKE = RunConfig(topology="chain", space="base", depth=3, base_channels=8, batch=4,
                  epochs_search=5, alpha_start_epoch=2, epochs_retrain=10, retrain_select_from=4,
                  n_valid=32, n_test=64, seed=0,
                  dataset=DatasetConfig(height=32, width=32, n_patches=128))


def _smoke(run_dir):
    cmd_search(SMOKE, run_dir)
    cmd_decode(run_dir)
    return cmd_retrain(run_dir)


@pytest.mark.slow
def test_criterion_5_end_to_end(criterion, tmp_path):
    with criterion(5, "chain smoke run: < 10 min, deterministic, beats background by 0.05") as notes:
        test = make_splits(SMOKE)["test"]
        background = mean_iou(np.zeros_like(test.masks), test.masks)
        start = time.perf_counter()
        first = _smoke(tmp_path / "a")
        elapsed = time.perf_counter() - start
        second = _smoke(tmp_path / "b")
        assert elapsed < 600, f"smoke run took {elapsed:.0f}s"
        assert (tmp_path / "a" / "arch.json").read_bytes() == (tmp_path / "b" / "arch.json").read_bytes()
        assert first.mean_iou == second.mean_iou
        assert first.mean_iou >= background + 0.05, (first.mean_iou, background)
        notes.append(f"MeanIoU {first.mean_iou:.4f}, background {background:.4f}, one run {elapsed:.0f}s")


# -- 6: random baseline ----------------------------------------------------------------

RANDOM = RunConfig(topology="darts-unet", base_channels=8, batch=4, epochs_search=5, alpha_start_epoch=2,
                   epochs_retrain=8, retrain_select_from=3, n_valid=32, n_test=64, random_samples=5,
                   dataset=DatasetConfig(height=32, width=32, n_patches=96))


@pytest.mark.slow
def test_criterion_6_random_baseline(criterion, tmp_path):
    with criterion(6, "random baseline n=5 beside the searched cell") as notes:
        cmd_search(RANDOM, tmp_path)
        cmd_decode(tmp_path)
        searched = cmd_retrain(tmp_path).mean_iou
        summary = cmd_random_baseline(RANDOM, tmp_path, 5)
        with (tmp_path / "random_baseline.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 5 and all(r["status"] == "ok" for r in rows)
        assert summary["searched_mean_iou"] == searched
        assert summary["max"] == pytest.approx(max(float(r["test_mean_iou"]) for r in rows), abs=1e-7)
        figures = {p.name for p in cmd_report(tmp_path)}
        assert "random_baseline.png" in figures
        notes.append(f"searched {searched:.4f}, random max {summary['max']:.4f}, mean {summary['mean']:.4f}")
        on_disk = json.loads((tmp_path / "random_summary.json").read_text())
        assert on_disk["n"] == 5 and on_disk["completed"] == 5


# -- 7: orchestrator -----------------------------------------------------------------------

CHAIN = build_topology("chain", depth=2, num_blocks=3, base_channels=4, stem_strides=1)


def test_criterion_7_orchestrator(criterion):
    with criterion(7, "worker-count independence, elitism and aging invariants, trace audit"):
        for seed in (0, 5):
            cfg = dict(pop_size=6, generations=3, seed=seed)
            h1 = run_evolution(EvolutionConfig(workers=1, **cfg), CHAIN, surrogate_fitness).history.normalized()
            h4 = run_evolution(EvolutionConfig(workers=4, **cfg), CHAIN, surrogate_fitness).history.normalized()
            assert h1 == h4
        rng = np.random.default_rng(0)
        for _ in range(20):
            pop = int(rng.integers(2, 8))
            age = float(rng.choice([0.0, 0.25, 0.5, 1.0]))
            cfg = EvolutionConfig(pop_size=pop, generations=int(rng.integers(2, 5)), aging_fraction=age,
                                  seed=int(rng.integers(1000)), workers=int(rng.integers(1, 4)))
            res = run_evolution(cfg, CHAIN, surrogate_fitness)
            assert all(b >= a for a, b in zip(res.population_best, res.population_best[1:]))
            assert all(len(r) == int(np.floor(age * pop)) for r in res.removed_by_aging)
            assert not {i for r in res.removed_by_aging for i in r} & {p.id for p in res.population}
            sent = sorted(t[1] for t in res.trace if t[0] == "job")
            got = sorted(t[1] for t in res.trace if t[0] == "result")
            assert sent == got == sorted(r["id"] for r in res.history.records)
        trace = []
        jobs = [JobMessage(i, sample_random_genotype(CHAIN, np.random.default_rng(i)), 1, i) for i in range(9)]
        results = dispatch(jobs, surrogate_fitness, 4, trace)
        assert sorted(results) == list(range(9))
        assert len([t for t in trace if t[0] == "result"]) == 9


# -- 8: degenerate cells ---------------------------------------------------------------------

def test_criterion_8_degenerate_cell(criterion, tmp_path):
    with criterion(8, "all skip/cut genotype trains and evaluates"):
        cfg = RunConfig(topology="darts-unet", base_channels=4, batch=4, epochs_retrain=2, retrain_select_from=0,
                        n_valid=4, n_test=8, dataset=DatasetConfig(height=32, width=32, n_patches=8))
        topo = cfg.build_topology()
        cells = {}
        for ct in topo.cell_types():
            edges = []
            for b in topo.cell.blocks:
                ins = topo.cell.in_edges(b)[:2]
                edges += [(topo.cell.edges[k][0], b, op) for k, op in zip(ins, ("skip", "cut"))]
            cells[ct] = CellGenotype(tuple(edges))
        g = Genotype(topo, cells, full_network_edges(topo))
        write_stage(tmp_path, cfg, "search", {})
        g.save(tmp_path / "genotype.json")
        report = cmd_retrain(tmp_path)
        assert 0.0 <= report.mean_iou <= 1.0
        assert read_manifest(tmp_path)["stages"]["retrain"]["status"] == "complete"
