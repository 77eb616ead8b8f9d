"""128-d face embeddings, Euclidean distance and the KNN recognizer."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol, Sequence, Union

import numpy as np

EMBEDDING_DIM = 128
DEFAULT_K = 1
DEFAULT_THRESHOLD = 0.6


class EmbeddingError(ValueError):
    """Raised when a vector violates the 128-d finite embedding rules."""


def as_embedding(values: Iterable[float]) -> np.ndarray:
    """Validate ``values`` and return a read-only float64 copy of shape (128,)."""
    try:
        arr = np.array(values, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise EmbeddingError(f"embedding is not numeric: {exc}") from None
    if arr.ndim != 1 or arr.shape[0] != EMBEDDING_DIM:
        raise EmbeddingError(
            f"embedding must hold exactly {EMBEDDING_DIM} values, got {arr.size}"
        )
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise EmbeddingError(f"embedding[{int(bad[0])}] is not finite ({arr[bad[0]]})")
    arr.flags.writeable = False
    return arr


def validate_label(label: str) -> str:
    if not isinstance(label, str) or not label:
        raise ValueError("label must be a non-empty string")
    if "/" in label or "\\" in label:
        raise ValueError(f"label {label!r} contains a path separator")
    return label


def _row_distances(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    # Scale each difference row by its max magnitude so tiny displacements
    # do not underflow to zero when squared.
    diff = matrix - query
    scale = np.max(np.abs(diff), axis=1)
    safe = np.where(scale > 0, scale, 1.0)
    normed = diff / safe[:, None]
    return scale * np.sqrt(np.sum(normed * normed, axis=1))


def distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two embeddings."""
    return float(_row_distances(np.asarray(a)[None, :], np.asarray(b))[0])


@dataclass(frozen=True)
class LabeledEmbedding:
    label: str
    embedding: np.ndarray

    def __post_init__(self) -> None:
        validate_label(self.label)
        object.__setattr__(self, "embedding", as_embedding(self.embedding))


@dataclass(frozen=True)
class Match:
    label: str
    distance: float


@dataclass(frozen=True)
class Unknown:
    # None only when the model holds no training vectors.
    nearest_distance: Optional[float] = None


RecognitionResult = Union[Match, Unknown]


class Recognizer(Protocol):
    """Anything that maps a query embedding to a recognition result."""

    def predict(self, query: np.ndarray) -> RecognitionResult: ...


@dataclass(frozen=True, eq=False)
class KnnModel:
    """Immutable KNN model that scans the whole training set per query.

    Build it with :func:`knn_fit`; ``k`` is already clamped to the training
    size.
    """

    training: tuple[LabeledEmbedding, ...]
    k: int
    threshold: float
    _matrix: np.ndarray
    _labels: np.ndarray

    @property
    def labels(self) -> frozenset[str]:
        return frozenset(e.label for e in self.training)

    def __len__(self) -> int:
        return len(self.training)

    def predict(self, query: np.ndarray) -> RecognitionResult:
        return knn_predict(self, query)


def knn_fit(
    training: Sequence[LabeledEmbedding],
    k: int = DEFAULT_K,
    threshold: float = DEFAULT_THRESHOLD,
) -> KnnModel:
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    if not (threshold > 0) or math.isnan(threshold):
        raise ValueError(f"threshold must be positive, got {threshold!r}")
    items = []
    for entry in training:
        if not isinstance(entry, LabeledEmbedding):
            entry = LabeledEmbedding(*entry)
        items.append(entry)
    items_t = tuple(items)
    if items_t:
        matrix = np.stack([e.embedding for e in items_t])
        k = min(k, len(items_t))
    else:
        matrix = np.empty((0, EMBEDDING_DIM))
    matrix.flags.writeable = False
    labels = np.array([e.label for e in items_t], dtype=str)
    return KnnModel(items_t, k, float(threshold), matrix, labels)


def knn_predict(model: KnnModel, query: np.ndarray) -> RecognitionResult:
    """Majority vote over the k nearest training vectors, with unknown rejection.

    Votes tie-break on the smaller nearest distance, then on the
    lexicographically smaller label. The winner is rejected as
    :class:`Unknown` when its own nearest neighbour lies beyond the
    threshold; ``Unknown.nearest_distance`` then reports that distance.
    """
    query = as_embedding(query)
    if len(model.training) == 0:
        return Unknown()
    dists = _row_distances(model._matrix, query)
    # Sort by distance, then label, so the k-set is independent of input order.
    order = np.lexsort((model._labels, dists))[: model.k]

    votes: Counter[str] = Counter()
    nearest: dict[str, float] = {}
    for idx in order:
        label = str(model._labels[idx])
        votes[label] += 1
        nearest.setdefault(label, float(dists[idx]))

    winner = min(votes, key=lambda lab: (-votes[lab], nearest[lab], lab))
    best = nearest[winner]
    if best > model.threshold:
        return Unknown(best)
    return Match(winner, best)
