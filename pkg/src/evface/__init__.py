"""Face-embedding authentication and quota enforcement for EV charging stations."""

from .embedding import (
    EMBEDDING_DIM,
    EmbeddingError,
    KnnModel,
    LabeledEmbedding,
    Match,
    Unknown,
    as_embedding,
    distance,
    knn_fit,
    knn_predict,
)

__all__ = [
    "EMBEDDING_DIM",
    "EmbeddingError",
    "KnnModel",
    "LabeledEmbedding",
    "Match",
    "Unknown",
    "as_embedding",
    "distance",
    "knn_fit",
    "knn_predict",
]
