import math

import numpy as np
import pytest

from evface.embedding import EMBEDDING_DIM, LabeledEmbedding


def brute_distance(a, b):
    """Elementwise sqrt-of-sum-of-squares, independent of the library path."""
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def brute_nearest(training, query):
    """Exhaustive scan: (label, distance) of the single closest vector.

    Exact-distance ties go to the lexicographically smaller label.
    """
    best = None
    for entry in training:
        d = brute_distance(entry.embedding, query)
        if best is None or (d, entry.label) < best:
            best = (d, entry.label)
    return None if best is None else (best[1], best[0])


def random_embedding(rng, scale=0.1):
    return rng.normal(0.0, scale, EMBEDDING_DIM)


def make_clusters(rng, n_clusters=3, per_cluster=2, sigma=0.05, min_sep=1.0):
    """Centroids at least ``min_sep`` apart plus isotropic noise of RMS norm ``sigma``."""
    centroids = []
    while len(centroids) < n_clusters:
        c = rng.normal(0.0, 0.1, EMBEDDING_DIM)
        if all(np.linalg.norm(c - o) >= min_sep for o in centroids):
            centroids.append(c)
    std = sigma / math.sqrt(EMBEDDING_DIM)
    labels = [chr(ord("A") + i) for i in range(n_clusters)]
    training = [
        LabeledEmbedding(lab, c + rng.normal(0.0, std, EMBEDDING_DIM))
        for lab, c in zip(labels, centroids)
        for _ in range(per_cluster)
    ]
    return labels, centroids, training, std


@pytest.fixture
def rng():
    return np.random.default_rng(20210615)
