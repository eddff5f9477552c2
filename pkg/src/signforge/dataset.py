"""On-disk datasets: class-directory ingestion and the synthetic generator.

A dataset root holds one subdirectory per class label (any subset of
A..Z, space, delete, nothing) with binary PPM images inside. The synthetic
generator writes a desk-scale stand-in dataset: class k is k+1 parallel
bright bars at orientation (k mod 4) * 45 degrees over a dim noisy
background, so classes differ in both stripe count and direction.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, SignForgeError
from .imaging import RgbImage, encode_ppm, preprocess
from .models import LABELS, LABEL_TO_INDEX
from .rng import Rng, fill_uniform

DEFAULT_VAL_FRACTION = 7000 / 87000

_BAR_WIDTH_PX = 1.0
_NOISE_CEIL = 64.0


@dataclass
class LabeledDataset:
    """Preprocessed [0,1] image tensors with class indices and source paths."""

    images: np.ndarray  # [n, 64, 64, 3] float32
    labels: np.ndarray  # [n] int64
    paths: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices],
                              [self.paths[i] for i in indices])

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(LABELS))


def ingest_directory(root) -> LabeledDataset:
    """Loads every PPM under the class directories of ``root``, sorted by path."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} is not a directory")
    images, labels, paths = [], [], []
    for entry in sorted(root.iterdir(), key=lambda p: p.name):
        if entry.name not in LABEL_TO_INDEX:
            raise ConfigError(f"unknown class directory {entry.name!r} in {root}")
        if not entry.is_dir():
            raise ConfigError(f"{entry} is not a directory")
        index = LABEL_TO_INDEX[entry.name]
        for path in sorted(entry.iterdir(), key=lambda p: p.name):
            try:
                tensor = preprocess(path.read_bytes())
            except (SignForgeError, OSError) as exc:
                raise type(exc)(f"{path}: {exc}") from exc
            images.append(tensor[0])
            labels.append(index)
            paths.append(str(path))
    if not images:
        raise ConfigError(f"no images found under {root}")
    return LabeledDataset(np.stack(images), np.asarray(labels, dtype=np.int64), paths)


def split_train_val(dataset: LabeledDataset, val_fraction: float,
                    seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded-shuffle partition; ``val_fraction`` of the items are held out."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise ConfigError(f"val_fraction {val_fraction} leaves an empty split "
                          f"for {n} items")
    perm = Rng(seed).permutation(n)
    return dataset.subset(perm[:n - n_val]), dataset.subset(perm[n - n_val:])


def render_pattern(class_index: int, phase: float, noise_seed: int) -> np.ndarray:
    """One 64x64x3 uint8 pattern image for ``class_index``.

    Bars are rendered by thresholding the fractional phase of the pixel's
    projection onto the stripe direction, so bar count and orientation are
    exact while the bar positions shift with ``phase``.
    """
    n_bars = class_index + 1
    theta = math.radians((class_index % 4) * 45.0)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    xs = np.arange(64, dtype=np.float64)
    proj = xs[None, :] * cos_t + xs[:, None] * sin_t
    span = proj.max() - proj.min()
    unit = (proj - proj.min()) / span
    duty = _BAR_WIDTH_PX * n_bars / span
    bars = (unit * n_bars + phase) % 1.0 < duty
    img = fill_uniform(noise_seed, 64 * 64 * 3, 0.0, _NOISE_CEIL).reshape(64, 64, 3)
    img = img.astype(np.uint8)
    img[bars] = 255
    return img


def generate_synthetic(out_root, per_class: int, seed: int) -> list[str]:
    """Writes ``per_class`` PPM images into each of the 29 class directories.

    Deterministic given ``seed``: the master stream hands every image a
    phase and a noise seed in (class, index) order. Returns the written
    paths in that order.
    """
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    out_root = Path(out_root)
    master = Rng(seed)
    written: list[str] = []
    for class_index, label in enumerate(LABELS):
        class_dir = out_root / label
        os.makedirs(class_dir, exist_ok=True)
        for i in range(per_class):
            phase = master.next_float()
            noise_seed = master.derive_seed()
            img = render_pattern(class_index, phase, noise_seed)
            path = class_dir / f"img_{i:04d}.ppm"
            path.write_bytes(encode_ppm(RgbImage.from_array(img)))
            written.append(str(path))
    return written
