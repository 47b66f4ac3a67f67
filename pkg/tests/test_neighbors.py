import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdlkit.neighbors import NeighborGraph, build_knn, cosine_similarity


def brute_force_knn(X, h):
    """Independent oracle: per-row full sort by (similarity desc, id asc)."""
    X = np.asarray(X, dtype=np.float64)
    unit = X / np.linalg.norm(X, axis=1, keepdims=True)
    n = len(X)
    ids_out = np.empty((n, h), dtype=np.int64)
    sims_out = np.empty((n, h))
    for i in range(n):
        sims = [float(np.dot(unit[i], unit[j])) for j in range(n)]
        order = sorted((j for j in range(n) if j != i), key=lambda j: (-sims[j], j))
        ids_out[i] = order[:h]
        sims_out[i] = [min(1.0, max(-1.0, sims[j])) for j in order[:h]]
    return ids_out, sims_out


class TestCosine:
    def test_identical_vectors(self):
        v = np.array([1.0, 2.0, -3.0])
        assert cosine_similarity(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)

    def test_opposite(self):
        assert cosine_similarity([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(-1.0)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), alpha=st.floats(0.01, 100.0))
    def test_symmetry_and_scale_invariance(self, seed, alpha):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=4) + 0.1, rng.normal(size=4) + 0.1
        assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a))
        assert cosine_similarity(alpha * a, b) == pytest.approx(
            cosine_similarity(a, b), abs=1e-9
        )


class TestBuildKnn:
    def test_axis_vectors_tie_break_to_lower_id(self):
        # All pairwise sims are 0; the tie rule picks the lower id.
        X = np.eye(3)
        graph = build_knn(X, h=1)
        assert graph.neighbor_ids[:, 0].tolist() == [1, 0, 0]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 16))
        graph = build_knn(X, h=20)
        oracle_ids, oracle_sims = brute_force_knn(X, 20)
        np.testing.assert_array_equal(graph.neighbor_ids, oracle_ids)
        np.testing.assert_allclose(graph.sims, oracle_sims, atol=1e-12)

    def test_duplicates_pick_their_twin(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(5, 8))
        X = np.vstack([base, base])  # row i duplicates row i+5
        graph = build_knn(X, h=1)
        for i in range(5):
            assert graph.neighbor_ids[i, 0] == i + 5
            assert graph.sims[i, 0] == pytest.approx(1.0)
            assert graph.neighbor_ids[i + 5, 0] == i

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(50, 8))
        a = build_knn(X, h=5)
        b = build_knn(4.0 * X, h=5)
        np.testing.assert_array_equal(a.neighbor_ids, b.neighbor_ids)

    def test_h_too_large_degrades_with_warning(self):
        X = np.random.default_rng(3).normal(size=(4, 3))
        with pytest.warns(UserWarning, match="population"):
            graph = build_knn(X, h=10)
        assert graph.h == 3
        assert graph.neighbor_ids.shape == (4, 3)

    def test_zero_norm_rejected(self):
        X = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(ValueError, match="zero-norm"):
            build_knn(X, h=1)

    def test_population_of_one_rejected(self):
        with pytest.raises(ValueError):
            build_knn(np.ones((1, 3)), h=1)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_lists_sorted_and_no_self_loops(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 40))
        X = rng.normal(size=(n, 6))
        h = int(rng.integers(1, n))
        graph = build_knn(X, h=h)
        for i in range(n):
            assert graph.window_ids[i] not in graph.neighbor_ids[i]
            sims = graph.sims[i]
            assert (np.diff(sims) <= 1e-15).all()
            assert (sims >= -1.0).all() and (sims <= 1.0).all()

    def test_custom_window_ids(self):
        X = np.eye(3)
        graph = build_knn(X, h=1, window_ids=[30, 10, 20])
        # Lowest *id* wins ties, independent of row order.
        got = {int(w): int(nbr) for w, nbr in zip(graph.window_ids, graph.neighbor_ids[:, 0])}
        assert got == {30: 10, 10: 20, 20: 10}

    def test_blocking_is_invisible(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(130, 8))
        a = build_knn(X, h=7, block_size=8)
        b = build_knn(X, h=7, block_size=1024)
        np.testing.assert_array_equal(a.neighbor_ids, b.neighbor_ids)


def test_jsonl_roundtrip(tmp_path):
    X = np.random.default_rng(5).normal(size=(20, 4))
    graph = build_knn(X, h=3)
    graph.to_jsonl(tmp_path / "g.jsonl")
    loaded = NeighborGraph.from_jsonl(tmp_path / "g.jsonl")
    np.testing.assert_array_equal(loaded.neighbor_ids, graph.neighbor_ids)
    np.testing.assert_array_equal(loaded.window_ids, graph.window_ids)
    np.testing.assert_allclose(loaded.sims, graph.sims)
    assert loaded.h == graph.h


def test_indices_map_ids_to_rows():
    X = np.eye(3)
    graph = build_knn(X, h=2, window_ids=[5, 9, 7])
    rows = graph.indices
    for i in range(3):
        for j in range(2):
            assert graph.window_ids[rows[i, j]] == graph.neighbor_ids[i, j]
