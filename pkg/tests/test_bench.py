import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import brute_nearest, make_clusters, random_embedding
from evface.bench import (
    BenchmarkReport,
    DatasetError,
    LabeledDataset,
    accuracy_percent,
    format_accuracy,
    load_dataset,
    render_jsonl,
    run_benchmark,
    sweep_parameters,
    write_embedding_file,
)
from evface.embedding import EMBEDDING_DIM, LabeledEmbedding, Match, Unknown, knn_fit


class AlwaysUnknown:
    def predict(self, query):
        return Unknown(None)


class ExactLookup:
    """Returns the label of a bit-identical stored vector."""

    def __init__(self, entries):
        self._table = {e.embedding.tobytes(): e.label for e in entries}

    def predict(self, query):
        label = self._table.get(np.asarray(query, dtype=np.float64).tobytes())
        return Match(label, 0.0) if label else Unknown(None)


def write_layout(root: Path, spec: dict, rng) -> None:
    for label, count in spec.items():
        (root / label).mkdir(parents=True)
        for i in range(count):
            write_embedding_file(root / label / f"{i}.emb", random_embedding(rng))


class TestLoadDataset:
    def test_folder_layout(self, tmp_path, rng):
        write_layout(tmp_path, {"alice": 2, "bob": 1}, rng)
        ds = load_dataset(tmp_path)
        assert len(ds) == 3
        assert ds.labels == ["alice", "bob"]
        assert [e.label for e in ds.entries] == ["alice", "alice", "bob"]

    def test_fifteen_label_folders(self, tmp_path, rng):
        write_layout(tmp_path, {f"p{i:02d}": 1 + i % 2 for i in range(15)}, rng)
        assert len(load_dataset(tmp_path).labels) == 15

    def test_round_trip_is_exact(self, tmp_path, rng):
        v = random_embedding(rng)
        (tmp_path / "x").mkdir()
        write_embedding_file(tmp_path / "x" / "a.emb", v)
        assert np.array_equal(load_dataset(tmp_path).entries[0].embedding, v)

    def test_ordering_is_lexicographic(self, tmp_path, rng):
        write_layout(tmp_path, {"b": 1, "a": 1}, rng)
        (tmp_path / "a" / "zz.emb").write_text((tmp_path / "b" / "0.emb").read_text())
        ds = load_dataset(tmp_path)
        assert [e.label for e in ds.entries] == ["a", "a", "b"]

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError, match="does not exist"):
            load_dataset(tmp_path / "nope")

    @pytest.mark.parametrize(
        "content,reason",
        [
            (" ".join(["0.1"] * 127), "exactly 128"),
            (" ".join(["0.1"] * 127 + ["nan"]), "not finite"),
            (" ".join(["0.1"] * 127 + ["abc"]), "unparseable"),
        ],
    )
    def test_malformed_file_names_file(self, tmp_path, content, reason):
        (tmp_path / "carol").mkdir()
        bad = tmp_path / "carol" / "bad.emb"
        bad.write_text(content)
        with pytest.raises(DatasetError, match=reason) as err:
            load_dataset(tmp_path)
        assert "bad.emb" in str(err.value)


class TestAccuracy:
    def test_144_of_166(self):
        assert format_accuracy(accuracy_percent(144, 166)) == "86.75"
        assert accuracy_percent(144, 166) == pytest.approx(86.7469879518, abs=1e-9)

    def test_bounds(self):
        assert accuracy_percent(0, 166) == 0.0
        assert accuracy_percent(166, 166) == 100.0

    @pytest.mark.parametrize("p,t", [(0, 0), (5, 4), (-1, 3)])
    def test_errors(self, p, t):
        with pytest.raises(ValueError):
            accuracy_percent(p, t)

    @given(st.integers(1, 10**6).flatmap(lambda t: st.tuples(st.integers(0, t), st.just(t))))
    def test_inverse_within_one_ulp(self, pt):
        p, t = pt
        back = accuracy_percent(p, t) * t / 100
        assert abs(back - p) <= math.ulp(max(p, 1.0))


class TestRunBenchmark:
    def test_self_consistency_is_perfect(self, rng):
        entries = [LabeledEmbedding(f"u{i}", random_embedding(rng)) for i in range(10)]
        report = run_benchmark(ExactLookup(entries), LabeledDataset(tuple(entries)))
        assert report.accuracy_percent == 100.0

    def test_always_unknown_scores_zero(self, rng):
        entries = [LabeledEmbedding("a", random_embedding(rng)) for _ in range(7)]
        report = run_benchmark(AlwaysUnknown(), entries)
        assert (report.positive_returns, report.negative_returns, report.accuracy_percent) == (0, 7, 0.0)

    def test_report_144_of_166(self):
        # 166 tests, 144 known (exact lookup) and 22 unseen vectors.
        rng = np.random.default_rng(0)
        known = [LabeledEmbedding(f"p{i % 15}", random_embedding(rng)) for i in range(144)]
        unseen = [LabeledEmbedding(f"p{i % 15}", random_embedding(rng)) for i in range(22)]
        report = run_benchmark(ExactLookup(known), known + unseen)
        assert report.total_tested == 166 and report.positive_returns == 144
        assert format_accuracy(report.accuracy_percent) == "86.75"

    def test_wrong_label_counts_negative(self, rng):
        v = random_embedding(rng)
        report = run_benchmark(ExactLookup([LabeledEmbedding("x", v)]), [LabeledEmbedding("y", v)])
        assert report.negative_returns == 1

    def test_empty_test_set(self):
        with pytest.raises(DatasetError):
            run_benchmark(AlwaysUnknown(), LabeledDataset(()))

    def test_conservation_and_per_label_counts(self):
        rng = np.random.default_rng(5)
        _, _, training, _ = make_clusters(rng, 3, per_cluster=3, sigma=0.4)
        model = knn_fit(training[::2], threshold=0.6)
        report = run_benchmark(model, training)
        assert report.positive_returns + report.negative_returns == report.total_tested
        assert sum(t for t, _ in report.per_label_counts.values()) == report.total_tested
        assert sum(p for _, p in report.per_label_counts.values()) == report.positive_returns

    def test_deterministic_bytes(self):
        rng = np.random.default_rng(9)
        _, _, training, _ = make_clusters(rng, 3, sigma=0.3)
        model = knn_fit(training[:3], threshold=0.6)
        assert run_benchmark(model, training).to_json() == run_benchmark(model, training).to_json()

    def test_appending_one_entry(self):
        rng = np.random.default_rng(13)
        _, centroids, training, std = make_clusters(rng, 3, sigma=0.3)
        model = knn_fit(training, threshold=0.6)
        base = run_benchmark(model, training)
        for _ in range(10):
            extra = LabeledEmbedding("A", centroids[0] + rng.normal(0, std, EMBEDDING_DIM))
            grown = run_benchmark(model, training + [extra])
            assert grown.total_tested == base.total_tested + 1
            assert grown.positive_returns - base.positive_returns in (0, 1)

    def test_jsonl_field_names(self):
        report = BenchmarkReport(4, 3, 1, 75.0, {}, (1, 0.6))
        assert json.loads(render_jsonl([report])) == {
            "k": 1, "threshold": 0.6, "total_tested": 4, "positive_returns": 3, "accuracy_percent": 75.0,
        }


def exhaustive_grid_oracle(train, test, k_grid, t_grid):
    """Score every cell with a hand-written k-NN; independent of evface.knn_predict."""
    def predict(query, k, t):
        scored = sorted(
            (math.sqrt(sum((a - b) ** 2 for a, b in zip(e.embedding, query))), e.label) for e in train
        )[: min(k, len(train))]
        votes, nearest = {}, {}
        for d, lab in scored:
            votes[lab] = votes.get(lab, 0) + 1
            nearest.setdefault(lab, d)
        win = min(votes, key=lambda lab: (-votes[lab], nearest[lab], lab))
        return win if nearest[win] <= t else None

    cells = []
    for k in k_grid:
        for t in t_grid:
            hits = sum(predict(e.embedding, k, t) == e.label for e in test)
            cells.append((k, t, hits))
    best = max(cells, key=lambda c: (c[2], -c[0], -c[1]))
    return cells, best


class TestSweep:
    def test_singleton_grid(self, rng):
        entries = [LabeledEmbedding("a", random_embedding(rng))]
        ds = LabeledDataset(tuple(entries))
        result = sweep_parameters(ds, ds, [1], [0.6])
        assert result.best == 0 and result.best_cell[:2] == (1, 0.6)

    def test_max_threshold_with_train_equals_test(self):
        rng = np.random.default_rng(17)
        _, _, training, _ = make_clusters(rng, 4, sigma=0.6)
        ds = LabeledDataset(tuple(training))
        result = sweep_parameters(ds, ds, [1, 3], [1e-6, 1.7976931348623157e308])
        k, t, rep = result.best_cell
        assert rep.accuracy_percent == 100.0 and k == 1

    def test_three_clusters_match_exhaustive_oracle(self):
        rng = np.random.default_rng(23)
        _, centroids, train, std = make_clusters(rng, 3, per_cluster=2, sigma=0.05)
        test = [
            LabeledEmbedding(lab, centroids[i] + rng.normal(0, std, EMBEDDING_DIM))
            for i, lab in enumerate("ABC")
            for _ in range(4)
        ]
        result = sweep_parameters(LabeledDataset(tuple(train)), LabeledDataset(tuple(test)), [1, 3], [0.1, 0.6])
        cells, best = exhaustive_grid_oracle(train, test, [1, 3], [0.1, 0.6])
        assert [(k, t, r.positive_returns) for k, t, r in result.grid] == cells
        k, t, rep = result.best_cell
        assert (k, t, rep.positive_returns) == best

    def test_tie_break_prefers_small_k_then_small_threshold(self, rng):
        entries = [LabeledEmbedding(f"u{i}", random_embedding(rng)) for i in range(3)]
        ds = LabeledDataset(tuple(entries))
        # Every cell scores 100 %: winner must be the first (k, t) in sorted order.
        result = sweep_parameters(ds, ds, [3, 1], [0.9, 0.5])
        assert result.best_cell[:2] == (1, 0.5)

    def test_empty_inputs(self, rng):
        ds = LabeledDataset((LabeledEmbedding("a", random_embedding(rng)),))
        with pytest.raises(ValueError):
            sweep_parameters(ds, ds, [], [0.6])
        with pytest.raises(DatasetError):
            sweep_parameters(LabeledDataset(()), ds, [1], [0.6])
