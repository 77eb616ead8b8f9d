"""Synthetic stand-in for the face-embedding dataset.

Each identity gets a random centroid; samples are centroid plus isotropic
Gaussian noise. ``sigma`` is the RMS norm of the noise vector, so the
per-coordinate standard deviation is ``sigma / sqrt(128)`` and two samples
of one identity sit roughly ``sigma * sqrt(2)`` apart.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .bench import EMBEDDING_SUFFIX, write_embedding_file
from .embedding import EMBEDDING_DIM

CountSpec = Union[int, tuple[int, int]]

# Per-coordinate spread of centroids; pairwise centroid distance is then ~1.6.
CENTROID_SCALE = 0.1
MAX_CENTROID_ATTEMPTS = 1000


class SeparationError(ValueError):
    """The requested minimum centroid separation could not be achieved."""


@dataclass(frozen=True)
class GeneratedDataset:
    train_dir: Path
    test_dir: Path
    labels: tuple[str, ...]
    train_count: int
    test_count: int


def draw_centroids(
    rng: np.random.Generator,
    identities: int,
    min_separation: float,
    scale: float = CENTROID_SCALE,
) -> np.ndarray:
    centroids: list[np.ndarray] = []
    for _ in range(identities):
        for _attempt in range(MAX_CENTROID_ATTEMPTS):
            candidate = rng.normal(0.0, scale, EMBEDDING_DIM)
            if all(np.linalg.norm(candidate - c) >= min_separation for c in centroids):
                centroids.append(candidate)
                break
        else:
            raise SeparationError(
                f"could not place {identities} centroids at least {min_separation} apart"
            )
    return np.array(centroids)


def _count(rng: np.random.Generator, spec: CountSpec) -> int:
    if isinstance(spec, tuple):
        lo, hi = spec
        return int(rng.integers(lo, hi + 1))
    return int(spec)


def generate_dataset(
    out_dir: Path | str,
    identities: int = 15,
    train: CountSpec = 2,
    test: CountSpec = 3,
    sigma: float = 0.05,
    min_separation: float = 1.0,
    seed: int = 0,
    overwrite: bool = False,
) -> GeneratedDataset:
    """Write ``<out>/train/<label>/*.emb`` and ``<out>/test/<label>/*.emb``.

    Output bytes depend only on the arguments, including ``seed``.
    """
    if identities < 1:
        raise ValueError("identities must be at least 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    for spec in (train, test):
        lo, hi = spec if isinstance(spec, tuple) else (spec, spec)
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid per-identity count {spec!r}")

    out = Path(out_dir)
    train_dir, test_dir = out / "train", out / "test"
    for d in (train_dir, test_dir):
        if d.exists() and any(d.iterdir()):
            if not overwrite:
                raise FileExistsError(f"{d} is not empty")
            shutil.rmtree(d)

    rng = np.random.default_rng(seed)
    centroids = draw_centroids(rng, identities, min_separation)
    noise_std = sigma / np.sqrt(EMBEDDING_DIM)
    width = max(2, len(str(identities)))
    labels = tuple(f"person_{i + 1:0{width}d}" for i in range(identities))

    n_train = n_test = 0
    for label, centroid in zip(labels, centroids):
        for split_dir, spec in ((train_dir, train), (test_dir, test)):
            count = _count(rng, spec)
            target = split_dir / label
            target.mkdir(parents=True, exist_ok=True)
            for j in range(count):
                sample = centroid + rng.normal(0.0, noise_std, EMBEDDING_DIM)
                write_embedding_file(target / f"{label}_{j + 1:02d}{EMBEDDING_SUFFIX}", sample)
            if split_dir is train_dir:
                n_train += count
            else:
                n_test += count
    return GeneratedDataset(train_dir, test_dir, labels, n_train, n_test)
