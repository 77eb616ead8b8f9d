import math
import random
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_distance, brute_nearest, make_clusters, random_embedding
from evface.embedding import (
    EMBEDDING_DIM,
    EmbeddingError,
    LabeledEmbedding,
    Match,
    Unknown,
    as_embedding,
    distance,
    knn_fit,
    knn_predict,
)

MAX_FLOAT = sys.float_info.max

coords = st.floats(min_value=-2.0, max_value=2.0, allow_nan=False, allow_infinity=False)
vectors = st.lists(coords, min_size=EMBEDDING_DIM, max_size=EMBEDDING_DIM).map(np.array)
labels = st.sampled_from(["alice", "bob", "carol", "dave"])
training_sets = st.lists(st.builds(LabeledEmbedding, labels, vectors), min_size=1, max_size=8)


class TestEmbedding128:
    def test_accepts_128_finite(self):
        e = as_embedding([0.5] * EMBEDDING_DIM)
        assert e.shape == (EMBEDDING_DIM,) and e.dtype == np.float64
        assert not e.flags.writeable

    @pytest.mark.parametrize("n", [0, 127, 129])
    def test_rejects_wrong_length(self, n):
        with pytest.raises(EmbeddingError, match="exactly 128"):
            as_embedding([0.0] * n)

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_rejects_non_finite_and_names_index(self, bad):
        values = [0.0] * EMBEDDING_DIM
        values[17] = bad
        with pytest.raises(EmbeddingError, match=r"embedding\[17\]"):
            as_embedding(values)

    @pytest.mark.parametrize("label", ["", "a/b", "a\\b"])
    def test_label_rules(self, label):
        with pytest.raises(ValueError):
            LabeledEmbedding(label, np.zeros(EMBEDDING_DIM))


class TestDistance:
    def test_identity_is_zero(self, rng):
        a = random_embedding(rng)
        assert distance(a, a) == 0.0

    def test_unit_displacement(self):
        a = np.zeros(EMBEDDING_DIM)
        b = np.zeros(EMBEDDING_DIM)
        b[42] = 1.0
        assert distance(a, b) == 1.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a, b = rng.normal(size=EMBEDDING_DIM), rng.normal(size=EMBEDDING_DIM)
            assert distance(a, b) == pytest.approx(brute_distance(a, b), rel=1e-12)

    def test_tiny_displacement_is_not_zero(self):
        a = np.zeros(EMBEDDING_DIM)
        b = np.zeros(EMBEDDING_DIM)
        b[0] = 1e-200
        assert distance(a, b) == pytest.approx(1e-200, rel=1e-12)

    @given(vectors, vectors)
    def test_symmetric_and_zero_iff_equal(self, a, b):
        d = distance(a, b)
        assert d >= 0
        assert d == distance(b, a)
        assert (d == 0) == bool(np.array_equal(a, b))


class TestKnnFit:
    def test_fifteen_identities(self, rng):
        training = [
            LabeledEmbedding(f"id{i:02d}", random_embedding(rng))
            for i in range(15)
            for _ in range(1 + i % 2)
        ]
        model = knn_fit(training, k=1)
        assert 15 <= len(model) <= 30
        assert len(model.labels) == 15

    def test_empty_model_is_always_unknown(self, rng):
        model = knn_fit([], k=1, threshold=0.6)
        assert knn_predict(model, random_embedding(rng)) == Unknown(None)

    def test_k_clamped_to_training_size(self, rng):
        training = [LabeledEmbedding("a", random_embedding(rng)), LabeledEmbedding("b", random_embedding(rng))]
        assert knn_fit(training, k=5).k == 2

    @pytest.mark.parametrize("k,threshold", [(0, 0.6), (-1, 0.6), (1, 0.0), (1, -0.5), (1, math.nan)])
    def test_rejects_bad_parameters(self, k, threshold):
        with pytest.raises(ValueError):
            knn_fit([], k=k, threshold=threshold)

    def test_rejects_invalid_embedding(self):
        with pytest.raises(EmbeddingError):
            knn_fit([("a", [0.0] * 127)])

    def test_model_is_immutable(self, rng):
        model = knn_fit([LabeledEmbedding("a", random_embedding(rng))])
        with pytest.raises(Exception):
            model.k = 3
        with pytest.raises(ValueError):
            model._matrix[0, 0] = 1.0


class TestKnnPredict:
    def test_exact_duplicate(self, rng):
        e = random_embedding(rng)
        model = knn_fit([LabeledEmbedding("solo", e)], threshold=1e-9)
        assert knn_predict(model, e) == Match("solo", 0.0)

    def test_beyond_threshold_is_unknown(self, rng):
        training = [LabeledEmbedding("a", np.zeros(EMBEDDING_DIM))]
        query = np.full(EMBEDDING_DIM, 0.1)  # distance 0.1 * sqrt(128) ~ 1.13
        result = knn_predict(knn_fit(training, threshold=0.6), query)
        assert isinstance(result, Unknown)
        assert result.nearest_distance == pytest.approx(brute_distance(query, np.zeros(EMBEDDING_DIM)))
        assert result.nearest_distance > 0.6

    def test_three_clusters_against_exhaustive_oracle(self):
        rng = np.random.default_rng(3)
        names, centroids, training, std = make_clusters(rng, 3, per_cluster=2, sigma=0.05)
        model = knn_fit(training, k=1, threshold=0.6)
        for _ in range(100):
            query = centroids[1] + rng.normal(0.0, std, EMBEDDING_DIM)
            label, d = brute_nearest(training, query)
            assert label == "B" and d <= 0.6
            result = knn_predict(model, query)
            assert isinstance(result, Match)
            assert result.label == label
            assert result.distance == pytest.approx(d, rel=1e-12)

    def test_majority_vote(self):
        base = np.zeros(EMBEDDING_DIM)

        def at(x):
            v = base.copy()
            v[0] = x
            return v

        # Nearest is "near", but two of the three nearest are "far".
        training = [
            LabeledEmbedding("near", at(0.10)),
            LabeledEmbedding("far", at(0.20)),
            LabeledEmbedding("far", at(0.25)),
        ]
        result = knn_predict(knn_fit(training, k=3, threshold=1.0), base)
        assert result == Match("far", pytest.approx(0.20))

    def test_vote_tie_goes_to_smaller_distance(self):
        base = np.zeros(EMBEDDING_DIM)
        a, b = base.copy(), base.copy()
        a[0], b[0] = 0.3, 0.1
        model = knn_fit([LabeledEmbedding("zed", b), LabeledEmbedding("amy", a)], k=2, threshold=1.0)
        assert knn_predict(model, base).label == "zed"

    def test_exact_tie_goes_to_smaller_label(self):
        base = np.zeros(EMBEDDING_DIM)
        a, b = base.copy(), base.copy()
        a[0], b[1] = 0.3, 0.3
        for order in ([("zed", b), ("amy", a)], [("amy", a), ("zed", b)]):
            model = knn_fit([LabeledEmbedding(*x) for x in order], k=1, threshold=1.0)
            assert knn_predict(model, base).label == "amy"

    def test_winner_beyond_threshold_is_unknown_even_if_other_label_is_close(self):
        base = np.zeros(EMBEDDING_DIM)

        def at(x):
            v = base.copy()
            v[0] = x
            return v

        training = [
            LabeledEmbedding("close", at(0.1)),
            LabeledEmbedding("crowd", at(0.8)),
            LabeledEmbedding("crowd", at(0.9)),
        ]
        result = knn_predict(knn_fit(training, k=3, threshold=0.5), base)
        assert result == Unknown(pytest.approx(0.8))


class TestKnnProperties:
    @settings(max_examples=60, deadline=None)
    @given(training_sets, vectors, st.randoms(use_true_random=False), st.integers(1, 4))
    def test_permutation_invariance(self, training, query, rnd, k):
        shuffled = list(training)
        rnd.shuffle(shuffled)
        a = knn_predict(knn_fit(training, k=k, threshold=3.0), query)
        b = knn_predict(knn_fit(shuffled, k=k, threshold=3.0), query)
        assert a == b

    @settings(max_examples=60, deadline=None)
    @given(training_sets, vectors, st.floats(0.01, 30.0))
    def test_k1_equals_argmin_oracle(self, training, query, threshold):
        label, d = brute_nearest(training, query)
        result = knn_predict(knn_fit(training, k=1, threshold=threshold), query)
        if isinstance(result, Match):
            assert result.label == label
            assert result.distance == pytest.approx(d, rel=1e-9)
        else:
            assert result.nearest_distance == pytest.approx(d, rel=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(training_sets, vectors, st.floats(0.01, 30.0), st.floats(0.0, 30.0), st.integers(1, 4))
    def test_threshold_monotonicity(self, training, query, t1, extra, k):
        t2 = t1 + extra
        first = knn_predict(knn_fit(training, k=k, threshold=t1), query)
        if isinstance(first, Match):
            assert knn_predict(knn_fit(training, k=k, threshold=t2), query) == first

    @settings(max_examples=40, deadline=None)
    @given(training_sets, vectors, st.integers(1, 4))
    def test_infinite_threshold_totality(self, training, query, k):
        assert isinstance(knn_predict(knn_fit(training, k=k, threshold=MAX_FLOAT), query), Match)

    @settings(max_examples=40, deadline=None)
    @given(training_sets)
    def test_self_consistency(self, training):
        # Duplicated vectors with different labels are legitimately ambiguous.
        model = knn_fit(training, k=1, threshold=0.6)
        for entry in training:
            result = knn_predict(model, entry.embedding)
            owners = sorted(e.label for e in training if np.array_equal(e.embedding, entry.embedding))
            assert result == Match(owners[0], 0.0)
            if len(set(owners)) == 1:
                assert result.label == entry.label

    @settings(max_examples=30, deadline=None)
    @given(training_sets, vectors)
    def test_determinism(self, training, query):
        model = knn_fit(training, k=3)
        assert knn_predict(model, query) == knn_predict(model, query)


def test_seeded_instances_against_oracle():
    rnd = random.Random(11)
    for _ in range(200):
        n = rnd.randint(1, 30)
        pool = [f"u{j}" for j in range(rnd.randint(1, 6))]
        training = [
            LabeledEmbedding(rnd.choice(pool), np.array([rnd.gauss(0, 0.1) for _ in range(EMBEDDING_DIM)]))
            for _ in range(n)
        ]
        query = np.array([rnd.gauss(0, 0.1) for _ in range(EMBEDDING_DIM)])
        threshold = rnd.uniform(1.0, 2.2)
        label, d = brute_nearest(training, query)
        result = knn_predict(knn_fit(training, k=1, threshold=threshold), query)
        expected = Match(label, pytest.approx(d, rel=1e-12)) if d <= threshold else Unknown(pytest.approx(d, rel=1e-12))
        assert result == expected
