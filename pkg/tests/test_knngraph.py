import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgcn_fabmap.knngraph import export_edge_list, graph_from_edges, knn_graph, knn_lists, normalize_adjacency, permute_graph
from oracles import knn_bruteforce


def edge_set(g):
    rows = np.repeat(np.arange(g.n_nodes), g.degree)
    return {(int(min(a, b)), int(max(a, b))) for a, b in zip(rows, g.indices)}


class TestKnn:
    def test_matches_oracle(self):
        X = np.random.default_rng(0).normal(size=(64, 5))
        assert edge_set(knn_graph(X, 9)) == knn_bruteforce(X, 9)

    def test_symmetric_and_loop_free(self):
        g = knn_graph(np.random.default_rng(1).normal(size=(30, 3)), 4)
        for i in range(g.n_nodes):
            assert i not in g.neighbors(i)
            for j in g.neighbors(i):
                assert i in g.neighbors(j)
            assert g.degree[i] >= 4

    def test_ties_prefer_lower_index(self):
        X = np.array([[0.0], [1.0], [-1.0], [5.0]])
        assert knn_lists(X, 1)[0, 0] == 1

    def test_k_bounds(self):
        X = np.zeros((4, 2))
        with pytest.raises(ValueError):
            knn_lists(X, 4)
        with pytest.raises(ValueError):
            knn_lists(X, 0)

    def test_parallel_blocks_agree(self):
        X = np.random.default_rng(2).normal(size=(50, 4))
        np.testing.assert_array_equal(knn_lists(X, 5, block=7, n_jobs=3), knn_lists(X, 5))

    def test_unsupported_metric(self):
        with pytest.raises(ValueError, match="metric"):
            knn_graph(np.zeros((3, 2)), 1, metric="cosine")


class TestGraphOps:
    def test_normalized_weights(self):
        g = normalize_adjacency(graph_from_edges(3, np.array([0, 1]), np.array([1, 2])))
        # degrees with self loop: 2, 3, 2
        assert g.weight(0, 1) == pytest.approx(1 / np.sqrt(6))
        assert g.weight(1, 1) == pytest.approx(1 / 3)
        assert g.weight(0, 2) == 0.0

    def test_permutation_preserves_structure(self):
        g = normalize_adjacency(knn_graph(np.random.default_rng(3).normal(size=(12, 2)), 3))
        perm = np.random.default_rng(4).permutation(12)
        gp = permute_graph(g, perm)
        for i in range(12):
            for j in range(12):
                assert gp.weight(i, j) == g.weight(perm[i], perm[j])

    def test_export(self, tmp_path):
        g = graph_from_edges(2, np.array([0]), np.array([1]))
        export_edge_list(g, tmp_path / "e.txt")
        assert (tmp_path / "e.txt").read_text().splitlines() == ["0 1 1.0", "1 0 1.0"]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_oracle_agreement_property(seed, k):
    X = np.random.default_rng(seed).normal(size=(15, 3))
    assert edge_set(knn_graph(X, k)) == knn_bruteforce(X, k)
