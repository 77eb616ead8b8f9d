"""Labelled embedding datasets, accuracy benchmark and parameter sweep."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .embedding import (
    EmbeddingError,
    LabeledEmbedding,
    Match,
    Recognizer,
    as_embedding,
    knn_fit,
)

EMBEDDING_SUFFIX = ".emb"


class DatasetError(Exception):
    """A dataset directory or one of its embedding files is unusable."""


@dataclass(frozen=True)
class LabeledDataset:
    entries: tuple[LabeledEmbedding, ...]
    source_root: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        return sorted({e.label for e in self.entries})


def parse_embedding_text(text: str) -> np.ndarray:
    tokens = text.split()
    try:
        values = [float(tok) for tok in tokens]
    except ValueError as exc:
        raise EmbeddingError(f"unparseable value: {exc}") from None
    return as_embedding(values)


def format_embedding_text(embedding: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in embedding) + "\n"


def read_embedding_file(path: Path | str) -> np.ndarray:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DatasetError(f"{path}: cannot read ({exc})") from None
    try:
        return parse_embedding_text(text)
    except EmbeddingError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def write_embedding_file(path: Path | str, embedding: Iterable[float]) -> None:
    Path(path).write_text(format_embedding_text(embedding), encoding="utf-8")


def load_dataset(root: Path | str) -> LabeledDataset:
    """Load ``<root>/<label>/<name>.emb`` files in lexicographic path order."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist or is not a directory")
    entries = []
    for label_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for emb_path in sorted(label_dir.glob(f"*{EMBEDDING_SUFFIX}")):
            if emb_path.is_file():
                entries.append(LabeledEmbedding(label_dir.name, read_embedding_file(emb_path)))
    return LabeledDataset(tuple(entries), str(root))


def accuracy_percent(positives: int, total: int) -> float:
    """Positive returns over total tested, as a percentage."""
    if total < 1:
        raise ValueError("accuracy is undefined for an empty test set")
    if positives < 0 or positives > total:
        raise ValueError(f"positives must lie in [0, {total}], got {positives}")
    return positives / total * 100


def format_accuracy(value: float) -> str:
    return f"{value:.2f}"


@dataclass(frozen=True)
class BenchmarkReport:
    total_tested: int
    positive_returns: int
    negative_returns: int
    accuracy_percent: float
    per_label_counts: dict[str, tuple[int, int]] = field(default_factory=dict)
    parameters: Optional[tuple[int, float]] = None

    def record(self) -> dict:
        k, threshold = self.parameters if self.parameters else (None, None)
        return {
            "k": k,
            "threshold": threshold,
            "total_tested": self.total_tested,
            "positive_returns": self.positive_returns,
            "accuracy_percent": self.accuracy_percent,
        }

    def to_json(self) -> str:
        doc = self.record()
        doc["negative_returns"] = self.negative_returns
        doc["per_label_counts"] = {k: list(v) for k, v in self.per_label_counts.items()}
        return json.dumps(doc, sort_keys=True)


def run_benchmark(
    recognizer: Recognizer,
    test: LabeledDataset | Sequence[LabeledEmbedding],
    parameters: Optional[tuple[int, float]] = None,
) -> BenchmarkReport:
    """Count a positive return only when the recognizer names the true label."""
    entries = test.entries if isinstance(test, LabeledDataset) else tuple(test)
    if not entries:
        raise DatasetError("test set is empty; accuracy is undefined")
    counts: dict[str, list[int]] = {}
    positives = 0
    for entry in entries:
        result = recognizer.predict(entry.embedding)
        hit = isinstance(result, Match) and result.label == entry.label
        slot = counts.setdefault(entry.label, [0, 0])
        slot[0] += 1
        slot[1] += int(hit)
        positives += int(hit)
    total = len(entries)
    return BenchmarkReport(
        total_tested=total,
        positive_returns=positives,
        negative_returns=total - positives,
        accuracy_percent=accuracy_percent(positives, total),
        per_label_counts={k: (v[0], v[1]) for k, v in sorted(counts.items())},
        parameters=parameters,
    )


@dataclass(frozen=True)
class SweepResult:
    grid: tuple[tuple[int, float, BenchmarkReport], ...]
    best: int

    @property
    def best_cell(self) -> tuple[int, float, BenchmarkReport]:
        return self.grid[self.best]


def sweep_parameters(
    train: LabeledDataset,
    test: LabeledDataset,
    k_grid: Sequence[int],
    threshold_grid: Sequence[float],
) -> SweepResult:
    """Benchmark every (k, threshold) pair and pick the most accurate.

    Equal accuracies go to the smaller k, then the smaller threshold.
    """
    if not train.entries:
        raise DatasetError("training set is empty")
    if not k_grid or not threshold_grid:
        raise ValueError("parameter grids must be non-empty")
    grid = []
    for k in k_grid:
        for threshold in threshold_grid:
            model = knn_fit(train.entries, k=k, threshold=threshold)
            report = run_benchmark(model, test, parameters=(k, float(threshold)))
            grid.append((k, float(threshold), report))
    best = min(
        range(len(grid)),
        key=lambda i: (-grid[i][2].accuracy_percent, grid[i][0], grid[i][1]),
    )
    return SweepResult(tuple(grid), best)


def render_table(reports: Sequence[BenchmarkReport], best: Optional[int] = None) -> str:
    header = f"{'k':>3} {'threshold':>10} {'tested':>7} {'positive':>9} {'negative':>9} {'accuracy %':>11}"
    lines = [header, "-" * len(header)]
    for i, rep in enumerate(reports):
        k, t = rep.parameters if rep.parameters else ("-", math.nan)
        mark = "  *" if best == i else ""
        lines.append(
            f"{k:>3} {t:>10.4g} {rep.total_tested:>7} {rep.positive_returns:>9} "
            f"{rep.negative_returns:>9} {format_accuracy(rep.accuracy_percent):>11}{mark}"
        )
    return "\n".join(lines)


def render_jsonl(reports: Sequence[BenchmarkReport]) -> str:
    return "".join(json.dumps(r.record()) + "\n" for r in reports)
