"""Run configuration: a versioned JSON document with fail-fast validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import DatasetConfig
from .space import NAMED_TOPOLOGIES, SPACES

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvolveSettings:
    pop_size: int = 8
    generations: int = 5
    workers: int = 1
    mutation_rate: float = 0.2
    aging_fraction: float = 0.25
    elitism: bool = True
    fitness_epochs: int = 10
    memory_budget: int | None = None


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run. Defaults use the published hyperparameters; the
    epoch budgets and dataset are reduced so a run fits on a laptop CPU
    (see README for the side-by-side table)."""

    topology: str = "darts-unet"
    space: str | None = None               # None: the topology's own space
    depth: int = 2
    num_blocks: int = 4
    base_channels: int = 16
    stem_strides: int = 2
    epochs_search: int = 30
    epochs_retrain: int = 40
    retrain_select_from: int = 15           # first epoch eligible for checkpoint selection
    batch: int = 2
    pc_k: int = 8
    edge_norm: bool | None = None           # None: on for DARTS cells, off for ResNeXt
    optimizer: str = "gaea"                 # gaea | softmax
    alpha_start_epoch: int = 15
    lr0: float = 0.01
    momentum: float = 0.9
    gaea_lr: float = 0.1
    weight_decay: float = 1e-3
    class_weights: tuple[float, float] = (1.0, 5.0)
    decode_cell: str = "normalized"         # argmax | topk | normalized
    decode_k: int = 2
    decode_paths: str = "all"               # all | viterbi | multipath
    n_valid: int = 128
    n_test: int = 128
    random_samples: int = 5
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    evolve: EvolveSettings = field(default_factory=EvolveSettings)
    schema_version: int = SCHEMA_VERSION

    @property
    def resolved_space(self) -> str:
        return self.space or NAMED_TOPOLOGIES[self.topology][2]

    @property
    def resolved_edge_norm(self) -> bool:
        if self.edge_norm is not None:
            return self.edge_norm
        return NAMED_TOPOLOGIES[self.topology][0] != "resnext"

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        if self.topology not in NAMED_TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}; valid: {sorted(NAMED_TOPOLOGIES)}")
        if self.resolved_space not in SPACES:
            raise ConfigError(f"unknown space {self.space!r}; valid: {sorted(SPACES)}")
        if self.topology == "resnext-unet":
            if self.resolved_space != "large":
                raise ConfigError("resnext-unet requires the large operation space")
            if self.resolved_edge_norm:
                raise ConfigError("resnext-unet cells have one input per block; edge_norm must be off")
        positive = ["depth", "num_blocks", "base_channels", "epochs_search", "epochs_retrain", "batch", "pc_k",
                    "decode_k", "n_valid", "n_test", "random_samples"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr0", "gaea_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight_decay must be >= 0 and momentum in [0, 1)")
        if self.stem_strides < 0 or self.alpha_start_epoch < 0 or self.retrain_select_from < 0:
            raise ConfigError("stem_strides, alpha_start_epoch and retrain_select_from must be >= 0")
        if self.optimizer not in ("gaea", "softmax"):
            raise ConfigError(f"optimizer must be 'gaea' or 'softmax', got {self.optimizer!r}")
        if self.decode_cell not in ("argmax", "topk", "normalized"):
            raise ConfigError(f"unknown decode_cell {self.decode_cell!r}")
        if self.decode_paths not in ("all", "viterbi", "multipath"):
            raise ConfigError(f"unknown decode_paths {self.decode_paths!r}")
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ConfigError("class_weights must be two positive numbers")
        ev = self.evolve
        if ev.pop_size < 2 or ev.generations < 1 or ev.workers < 1 or ev.fitness_epochs < 1:
            raise ConfigError("evolve: pop_size >= 2, generations, workers and fitness_epochs >= 1")
        if not 0 <= ev.mutation_rate <= 1 or not 0 <= ev.aging_fraction <= 1:
            raise ConfigError("evolve: mutation_rate and aging_fraction must lie in [0, 1]")
        factor = 2 ** (self.stem_strides + self.build_topology().network.max_scale())
        if self.dataset.height % factor or self.dataset.width % factor:
            raise ConfigError(f"dataset height and width must be divisible by {factor} for this topology")
        try:
            self.dataset.validate()
        except ValueError as exc:
            raise ConfigError(f"dataset: {exc}") from exc
        return self

    def build_topology(self):
        from .space import build_topology

        return build_topology(self.topology, self.resolved_space, self.depth, self.num_blocks,
                              self.base_channels, self.stem_strides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        d["dataset"]["shapes"] = list(self.dataset.shapes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        _reject_unknown(d, cls, "")
        if "dataset" in d:
            _reject_unknown(d["dataset"], DatasetConfig, "dataset.")
            d["dataset"] = DatasetConfig.from_dict(d["dataset"])
        if "evolve" in d:
            _reject_unknown(d["evolve"], EvolveSettings, "evolve.")
            d["evolve"] = EvolveSettings(**d["evolve"])
        if "class_weights" in d:
            d["class_weights"] = tuple(d["class_weights"])
        return cls(**d).validate()

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw).validate()


def _reject_unknown(d: dict, cls, prefix: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
