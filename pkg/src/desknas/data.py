"""Synthetic two-class segmentation patches with small, sparse, border-clipped objects."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from skimage.draw import ellipse, polygon


@dataclass(frozen=True)
class DatasetConfig:
    height: int = 64
    width: int = 64
    n_patches: int = 512
    object_rate: float = 0.7          # fraction of patches that contain objects
    max_objects: int = 3
    shapes: tuple[str, ...] = ("ellipse", "polygon")
    edge_clipping: float = 0.2        # fraction of objects centred on the border band
    min_size: int = 2                 # semi-axis / radius range in pixels
    max_size: int = 5
    contrast: float = 1.0
    noise: float = 0.3

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError(f"patches must be at least 16x16, got {self.height}x{self.width}")
        if not 0 <= self.object_rate <= 1 or not 0 <= self.edge_clipping <= 1:
            raise ValueError("object_rate and edge_clipping must lie in [0, 1]")
        if self.min_size < 1 or self.max_size < self.min_size:
            raise ValueError(f"invalid object size range [{self.min_size}, {self.max_size}]")
        if 2 * self.max_size + 1 > min(self.height, self.width):
            raise ValueError(f"objects up to {2 * self.max_size + 1}px do not fit a "
                             f"{self.height}x{self.width} patch")
        unknown = set(self.shapes) - {"ellipse", "polygon"}
        if unknown or not self.shapes:
            raise ValueError(f"shapes must be drawn from ellipse/polygon, got {self.shapes}")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "shapes" in d:
            d["shapes"] = tuple(d["shapes"])
        return cls(**d)


@dataclass
class DatasetSplit:
    images: np.ndarray                # (N, 1, H, W) float32
    masks: np.ndarray                 # (N, H, W) uint8 in {0, 1}
    role: str = "train"
    seed: int = 0
    config: DatasetConfig = field(default_factory=DatasetConfig)

    def __len__(self) -> int:
        return len(self.images)

    def foreground_fraction(self) -> float:
        return float(self.masks.mean())

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], self.masks[idx]


def _background(rng: np.random.Generator, h: int, w: int, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    gx, gy = rng.normal(0, 0.3, size=2)
    base = gx * xx + gy * yy
    # low-frequency texture: coarse noise upsampled by block repetition
    cell = int(rng.integers(4, 9))
    coarse = rng.normal(0, 0.25, size=(h // cell + 2, w // cell + 2))
    texture = np.kron(coarse, np.ones((cell, cell)))[:h, :w]
    return base + texture + rng.normal(0, noise, size=(h, w))


def _object(rng: np.random.Generator, cfg: DatasetConfig, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    size = rng.uniform(cfg.min_size, cfg.max_size)
    if rng.random() < cfg.edge_clipping:
        # centre within `size` of a random border so the object is cut by the patch edge
        side = rng.integers(4)
        along = rng.uniform(0, (w if side < 2 else h) - 1)
        depth = rng.uniform(0, size * 0.8)
        r, c = [(depth, along), (h - 1 - depth, along), (along, depth), (along, w - 1 - depth)][side]
    else:
        r = rng.uniform(size, h - 1 - size)
        c = rng.uniform(size, w - 1 - size)
    shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
    if shape == "ellipse":
        ratio = rng.uniform(0.5, 1.0)
        rr, cc = ellipse(r, c, size, size * ratio, shape=(h, w), rotation=rng.uniform(0, np.pi))
    else:
        n = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        radii = size * rng.uniform(0.6, 1.0, size=n)
        rr, cc = polygon(r + radii * np.sin(angles), c + radii * np.cos(angles), shape=(h, w))
    return rr, cc


def generate_synthetic_dataset(config: DatasetConfig, seed: int, role: str = "train") -> DatasetSplit:
    """Deterministic per ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    images = np.empty((config.n_patches, 1, h, w), dtype=np.float32)
    masks = np.zeros((config.n_patches, h, w), dtype=np.uint8)
    for n in range(config.n_patches):
        img = _background(rng, h, w, config.noise)
        if rng.random() < config.object_rate:
            for _ in range(int(rng.integers(1, config.max_objects + 1))):
                rr, cc = _object(rng, config, h, w)
                masks[n, rr, cc] = 1
        sign = 1.0 if rng.random() < 0.8 else -1.0
        img = img + sign * config.contrast * masks[n] * rng.uniform(0.8, 1.2)
        images[n, 0] = img
    return DatasetSplit(images, masks, role, seed, config)


def generate_splits(config: DatasetConfig, seed: int, n_valid: int = 128, n_test: int = 128) -> dict[str, DatasetSplit]:
    """Train/valid/test splits from disjoint child seeds."""
    seeds = np.random.SeedSequence(seed).generate_state(3)
    sizes = {"train": config.n_patches, "valid": n_valid, "test": n_test}
    out = {}
    for (role, n), s in zip(sizes.items(), seeds):
        cfg = DatasetConfig(**{**asdict(config), "n_patches": n})
        out[role] = generate_synthetic_dataset(cfg, int(s), role)
    return out


# -- on-disk cache -----------------------------------------------------------
#
# <dir>/<role>.bin   images as little-endian float32 (N*1*H*W values, C order)
#                    followed by masks as uint8 (N*H*W values)
# <dir>/index.json   {"schema": "desknas-dataset/1", "splits": {role: {"n", "height",
#                    "width", "seed", "file", "images_offset", "masks_offset", "config"}}}

def save_dataset(directory, splits: dict[str, DatasetSplit]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"schema": "desknas-dataset/1", "splits": {}}
    for role, split in splits.items():
        images = np.ascontiguousarray(split.images, dtype="<f4").tobytes()
        masks = np.ascontiguousarray(split.masks, dtype=np.uint8).tobytes()
        (directory / f"{role}.bin").write_bytes(images + masks)
        n, _, h, w = split.images.shape
        index["splits"][role] = {"n": n, "height": h, "width": w, "seed": split.seed,
                                 "file": f"{role}.bin", "images_offset": 0, "masks_offset": len(images),
                                 "config": asdict(split.config)}
    (directory / "index.json").write_text(json.dumps(index, indent=2))


def load_dataset(directory) -> dict[str, DatasetSplit]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    if index.get("schema") != "desknas-dataset/1":
        raise ValueError(f"{directory}: unsupported dataset index")
    out = {}
    for role, meta in index["splits"].items():
        cfg = DatasetConfig.from_dict(meta["config"])
        buf = (directory / meta["file"]).read_bytes()
        n, h, w = meta["n"], meta["height"], meta["width"]
        images = np.frombuffer(buf, dtype="<f4", count=n * h * w, offset=meta["images_offset"])
        masks = np.frombuffer(buf, dtype=np.uint8, count=n * h * w, offset=meta["masks_offset"])
        out[role] = DatasetSplit(images.reshape(n, 1, h, w).astype(np.float32), masks.reshape(n, h, w).copy(),
                                 role, meta["seed"], cfg)
    return out
