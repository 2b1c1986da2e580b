"""Synthetic multi-class task used as a desk-scale stand-in for image data.

Each class has a mean in a low-dimensional signal block; the remaining
coordinates are label-independent Gaussian noise, the multi-class analogue
of the linear-model setup in :mod:`dsinfer.theory`. Everything is mapped
into the unit box ``[0, 1]^dim``.

A single draw of ``n_total`` rows is partitioned into named pools so that
disjointness between pools holds exactly at the index level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import LabeledSet


@dataclass(frozen=True)
class TaskConfig:
    num_classes: int = 10
    signal_dim: int = 10
    noise_dim: int = 40
    class_sep: float = 1.0
    signal_std: float = 1.0
    noise_std: float = 1.0
    box_scale: float = 0.12
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.signal_dim + self.noise_dim

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Task:
    config: TaskConfig
    pools: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> LabeledSet:
        return self.pools[name]


def class_means(cfg: TaskConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 1])
    return rng.normal(0.0, cfg.class_sep, size=(cfg.num_classes, cfg.signal_dim))


def sample_rows(cfg: TaskConfig, n: int, stream: int):
    """Draw ``n`` labelled rows from the task distribution (stream-separated)."""
    rng = np.random.default_rng([cfg.seed, 2, stream])
    mu = class_means(cfg)
    y = rng.integers(0, cfg.num_classes, size=n)
    sig = mu[y] + rng.normal(0.0, cfg.signal_std, size=(n, cfg.signal_dim))
    noise = rng.normal(0.0, cfg.noise_std, size=(n, cfg.noise_dim))
    x = np.clip(0.5 + cfg.box_scale * np.hstack([sig, noise]), 0.0, 1.0)
    return x, y


def make_task(cfg: TaskConfig, sizes: dict) -> Task:
    """Partition one draw into pools, e.g. ``{"victim": ("private_train", 1000), ...}``.

    ``sizes`` maps pool name to ``(split_tag, n)``; rows are assigned in the
    mapping's order and carry their global row id in ``LabeledSet.index``.
    """
    total = sum(n for _, n in sizes.values())
    x, y = sample_rows(cfg, total, stream=0)
    task = Task(cfg)
    off = 0
    for name, (tag, n) in sizes.items():
        rows = np.arange(off, off + n)
        task.pools[name] = LabeledSet(x[rows], y[rows], tag, rows)
        off += n
    return task


def gaussian_blobs(n: int, num_classes: int, dim: int, sep: float, seed) -> LabeledSet:
    """Isotropic blobs in the unit box, used for small training sanity checks."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.5 - sep, 0.5 + sep, size=(num_classes, dim))
    y = rng.integers(0, num_classes, size=n)
    x = np.clip(centers[y] + rng.normal(0.0, 0.05, size=(n, dim)), 0.0, 1.0)
    return LabeledSet(x, y, "synthetic")
