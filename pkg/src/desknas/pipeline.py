"""Experiment stages operating on a self-describing run directory.

``manifest.json`` holds the config snapshot, the artifacts of every finished
stage and an overall status; it is rewritten atomically after each stage.
"""

from __future__ import annotations

import csv
import json
import os
import re
import time
from pathlib import Path

import numpy as np

from .arch_optim import read_entropy_csv
from .config import RunConfig
from .data import DatasetSplit, generate_splits
from .decoder import cell_to_dot, decode_arch, network_to_dot
from .evolution import EvolutionConfig, JobMessage, run_evolution, run_random_search
from .genotype import Genotype
from .metrics import EvalReport, mean_iou, read_pr_csv
from .supernet import ArchParams, SuperNet, build_discrete_network
from .tensor.checkpoint import load_state_dict, save_weights, state_dict
from .training import TrainSettings, evaluate, run_retrain, run_search

MANIFEST = "manifest.json"
MANIFEST_SCHEMA = "desknas-manifest/1"


class StageError(RuntimeError):
    pass


# -- manifest ----------------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise StageError(f"{run_dir}: no {MANIFEST}; run 'search' first or pass a run directory")
    return json.loads(path.read_text())


def write_stage(run_dir, config: RunConfig, stage: str, artifacts: dict, summary: dict | None = None) -> dict:
    run_dir = Path(run_dir)
    path = run_dir / MANIFEST
    manifest = json.loads(path.read_text()) if path.exists() else {"schema": MANIFEST_SCHEMA, "stages": {}}
    manifest["config"] = config.to_dict()
    manifest["stages"][stage] = {"status": "complete", "artifacts": artifacts, "summary": summary or {},
                                 "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}
    manifest["status"] = f"{stage} complete"
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def config_of(run_dir) -> RunConfig:
    return RunConfig.from_dict(read_manifest(run_dir)["config"])


# -- shared helpers ------------------------------------------------------------

def make_splits(config: RunConfig) -> dict[str, DatasetSplit]:
    return generate_splits(config.dataset, config.seed, config.n_valid, config.n_test)


def retrain_settings(config: RunConfig, epochs: int | None = None, seed: int | None = None) -> TrainSettings:
    return TrainSettings(epochs=epochs or config.epochs_retrain, batch=config.batch, lr0=config.lr0,
                         momentum=config.momentum, weight_decay=config.weight_decay,
                         class_weights=tuple(config.class_weights), seed=config.seed if seed is None else seed,
                         select_from=config.retrain_select_from)


def train_genotype(genotype: Genotype, splits: dict[str, DatasetSplit], settings: TrainSettings):
    """Fresh weights, retrain, restore the selected checkpoint; returns (network, result)."""
    net = build_discrete_network(genotype, settings.seed, in_channels=splits["train"].images.shape[1])
    result = run_retrain(net, splits["train"], splits["valid"], settings)
    load_state_dict(net, result.best_state)
    return net, result


def _write_rows(path: Path, header: list[str], rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _epoch_rows(records):
    return [[r.epoch, f"{r.loss:.8g}", f"{r.lr:.8g}", f"{r.valid_miou:.8g}", f"{r.mean_entropy:.8g}",
             int(r.arch_updated)] for r in records]


EPOCH_HEADER = ["epoch", "loss", "lr", "valid_miou", "mean_entropy", "arch_updated"]


def genotype_text(genotype: Genotype) -> str:
    lines = [f"topology {genotype.topology.name}"]
    for ct, cell in sorted(genotype.cells.items()):
        for i, j, op in cell.edges:
            lines.append(f"{ct} {i}->{j} {op}")
    net = genotype.topology.network
    for e in genotype.network_edges:
        u, v = net.edges[e]
        lines.append(f"network {net.nodes[u].name}->{net.nodes[v].name}")
    return "\n".join(lines) + "\n"


_DOT_EDGE = re.compile(r'^\s*n(\d+) -> n(\d+) \[label="([^"]+)"\];$')


def parse_cell_dot(text: str) -> set[tuple[int, int, str]]:
    """Labelled op edges of a cell graph written by :func:`cell_to_dot`."""
    out = set()
    for line in text.splitlines():
        m = _DOT_EDGE.match(line)
        if m:
            out.add((int(m.group(1)), int(m.group(2)), m.group(3)))
    return out


# -- stages --------------------------------------------------------------------

def cmd_search(config: RunConfig, run_dir=None) -> Path:
    config.validate()
    run_dir = Path(run_dir or config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    topology = config.build_topology()
    splits = make_splits(config)
    supernet = SuperNet(topology, config.seed, config.pc_k, config.resolved_edge_norm,
                        theta_mode=config.optimizer == "gaea",
                        in_channels=splits["train"].images.shape[1])
    settings = TrainSettings(epochs=config.epochs_search, batch=config.batch, lr0=config.lr0,
                             momentum=config.momentum, weight_decay=config.weight_decay,
                             class_weights=tuple(config.class_weights), seed=config.seed,
                             alpha_start_epoch=config.alpha_start_epoch, arch_lr=config.gaea_lr)
    result = run_search(supernet, splits["train"], splits["valid"], settings)
    supernet.arch.save(run_dir / "arch.json")
    save_weights(run_dir / "supernet.ckpt", state_dict(supernet.net))
    result.entropy.to_csv(run_dir / "entropy.csv")
    _write_rows(run_dir / "search_log.csv", EPOCH_HEADER, _epoch_rows(result.epochs))
    write_stage(run_dir, config, "search",
                {"arch": "arch.json", "supernet_weights": "supernet.ckpt", "entropy": "entropy.csv",
                 "log": "search_log.csv"},
                {"best_valid_miou": max(r.valid_miou for r in result.epochs),
                 "final_mean_entropy": result.epochs[-1].mean_entropy})
    return run_dir


def cmd_decode(run_dir, cell_mode: str | None = None, k: int | None = None,
               path_mode: str | None = None) -> Genotype:
    run_dir = Path(run_dir)
    config = config_of(run_dir)
    arch_path = run_dir / "arch.json"
    if not arch_path.exists():
        raise StageError(f"{run_dir}: missing architecture checkpoint arch.json")
    arch = ArchParams.load(arch_path)
    cell_mode = cell_mode or config.decode_cell
    k = config.decode_k if k is None else k
    path_mode = path_mode or config.decode_paths
    genotype = decode_arch(arch, cell_mode, k, path_mode)
    genotype.save(run_dir / "genotype.json")
    (run_dir / "genotype.txt").write_text(genotype_text(genotype))
    artifacts = {"genotype": "genotype.json", "genotype_text": "genotype.txt", "network_dot": "network.dot"}
    for ct, cell in genotype.cells.items():
        (run_dir / f"cell_{ct}.dot").write_text(cell_to_dot(cell, genotype.topology.cell, ct))
        artifacts[f"cell_dot_{ct}"] = f"cell_{ct}.dot"
    (run_dir / "network.dot").write_text(network_to_dot(genotype))
    write_stage(run_dir, config, "decode", artifacts, {"cell_mode": cell_mode, "k": k, "path_mode": path_mode})
    return genotype


def cmd_retrain(run_dir, genotype_path=None) -> EvalReport:
    run_dir = Path(run_dir)
    config = config_of(run_dir)
    path = Path(genotype_path) if genotype_path else run_dir / "genotype.json"
    if not path.exists():
        raise StageError(f"{run_dir}: missing genotype {path.name}; run 'decode' first")
    genotype = Genotype.load(path)
    genotype.validate()
    splits = make_splits(config)
    net, result = train_genotype(genotype, splits, retrain_settings(config))
    report, preds = evaluate(net, splits["test"], config.batch)
    save_weights(run_dir / "retrained.ckpt", state_dict(net))
    np.savez_compressed(run_dir / "test_predictions.npz", pred=preds, gt=splits["test"].masks)
    report.to_csv(run_dir / "metrics.csv")
    _write_rows(run_dir / "retrain_log.csv", EPOCH_HEADER, _epoch_rows(result.epochs))
    background = mean_iou(np.zeros_like(splits["test"].masks), splits["test"].masks)
    write_stage(run_dir, config, "retrain",
                {"weights": "retrained.ckpt", "metrics": "metrics.csv", "predictions": "test_predictions.npz",
                 "log": "retrain_log.csv"},
                {"test_mean_iou": report.mean_iou, "best_epoch": result.best_epoch,
                 "best_valid_miou": result.best_valid_miou, "background_mean_iou": background})
    return report


def cmd_random_baseline(config: RunConfig, run_dir=None, n_samples: int | None = None) -> dict:
    """Retrain ``n`` uniformly sampled genotypes with the retrain budget and
    report their test MeanIoU beside the searched cell's (if retrained)."""
    config.validate()
    run_dir = Path(run_dir or config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    n = n_samples or config.random_samples
    if n < 1:
        raise StageError(f"n_samples must be >= 1, got {n}")
    topology = config.build_topology()
    splits = make_splits(config)

    def fitness(job: JobMessage) -> float:
        net, _ = train_genotype(job.genotype, splits, retrain_settings(config, seed=job.seed))
        return evaluate(net, splits["test"], config.batch)[0].mean_iou

    genotypes, results = run_random_search(topology, n, fitness, config.seed, budget=config.epochs_retrain)
    rows = [[i, "" if r.fitness is None else f"{r.fitness:.8g}", r.status, g.key()]
            for i, (g, r) in enumerate(zip(genotypes, results))]
    _write_rows(run_dir / "random_baseline.csv", ["sample", "test_mean_iou", "status", "genotype"], rows)
    scores = [r.fitness for r in results if r.fitness is not None]
    searched = None
    manifest_path = run_dir / MANIFEST
    if manifest_path.exists():
        searched = read_manifest(run_dir)["stages"].get("retrain", {}).get("summary", {}).get("test_mean_iou")
    summary = {"n": n, "completed": len(scores),
               "mean": float(np.mean(scores)) if scores else None,
               "std": float(np.std(scores)) if scores else None,
               "max": max(scores) if scores else None, "min": min(scores) if scores else None,
               "searched_mean_iou": searched}
    (run_dir / "random_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_stage(run_dir, config, "random_baseline",
                {"samples": "random_baseline.csv", "summary": "random_summary.json"}, summary)
    return summary


def cmd_evolve(config: RunConfig, run_dir=None, resume: bool = False, fitness_fn=None) -> Path:
    config.validate()
    run_dir = Path(run_dir or config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    topology = config.build_topology()
    ev = config.evolve
    if fitness_fn is None:
        splits = make_splits(config)

        def fitness_fn(job: JobMessage) -> float:
            settings = retrain_settings(config, epochs=job.budget, seed=job.seed)
            settings.select_from = 0
            _, result = train_genotype(job.genotype, splits, settings)
            return result.best_valid_miou

    d = config.dataset
    evo = EvolutionConfig(pop_size=ev.pop_size, generations=ev.generations, workers=ev.workers,
                          mutation_rate=ev.mutation_rate, aging_fraction=ev.aging_fraction, elitism=ev.elitism,
                          seed=config.seed, budget=ev.fitness_epochs, memory_budget=ev.memory_budget,
                          input_shape=(1, d.height, d.width), batch=config.batch)
    result = run_evolution(evo, topology, fitness_fn, run_dir / "history.jsonl", resume=resume)
    _write_rows(run_dir / "population.csv", ["generation", "best_fitness"],
                [[g, "" if b is None else f"{b:.8g}"] for g, b in enumerate(result.population_best)])
    statuses = {}
    for r in result.history.records:
        statuses[r["status"]] = statuses.get(r["status"], 0) + 1
    write_stage(run_dir, config, "evolve", {"history": "history.jsonl", "population": "population.csv"},
                {"records": len(result.history), "statuses": statuses,
                 "best_fitness": result.population_best[-1]})
    return run_dir / "history.jsonl"


def cmd_report(run_dir) -> list[Path]:
    """Render figures for whatever stages the run directory contains."""
    from . import plotting

    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    config = RunConfig.from_dict(manifest["config"])
    figures = []
    if (run_dir / "entropy.csv").exists():
        figures.append(plotting.plot_entropy(read_entropy_csv(run_dir / "entropy.csv"), run_dir / "entropy.png",
                                             config.alpha_start_epoch))
    for log_name, fig_name, title in (("search_log.csv", "search_training.png", "search"),
                                      ("retrain_log.csv", "retrain_training.png", "retrain")):
        if (run_dir / log_name).exists():
            with (run_dir / log_name).open() as fh:
                figures.append(plotting.plot_training(list(csv.DictReader(fh)), run_dir / fig_name, title))
    if (run_dir / "metrics.csv").exists():
        figures.append(plotting.plot_pr_curve(read_pr_csv(run_dir / "metrics.csv"), run_dir / "pr_curve.png"))
    if (run_dir / "random_baseline.csv").exists():
        with (run_dir / "random_baseline.csv").open() as fh:
            scores = [float(r["test_mean_iou"]) for r in csv.DictReader(fh) if r["test_mean_iou"]]
        searched = json.loads((run_dir / "random_summary.json").read_text()).get("searched_mean_iou")
        figures.append(plotting.plot_random_baseline(scores, run_dir / "random_baseline.png", searched))
    if (run_dir / "history.jsonl").exists():
        from .evolution import History

        figures.append(plotting.plot_evolution(History.read_jsonl(run_dir / "history.jsonl"),
                                               run_dir / "evolution.png"))
    write_stage(run_dir, config, "report", {f.stem: f.name for f in figures})
    return figures

