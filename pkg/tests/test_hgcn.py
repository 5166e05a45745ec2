import numpy as np
import pytest
import torch

from hgcn_fabmap import hgcn
from hgcn_fabmap import hyperbolic as hyp
from hgcn_fabmap.hyperbolic import HPoint, HTangent
from hgcn_fabmap.knngraph import graph_from_edges, knn_graph, normalize_adjacency, permute_graph
from hgcn_fabmap.vocab import quantize


def lift(v, k=1.0) -> HPoint:
    """Euclidean vector -> hyperboloid point via the exp map at the origin."""
    o = HPoint.origin(len(v), k)
    return hyp.exp_map(HTangent(o, np.concatenate([[0.0], v])))


def two_blobs(n_per=30, dim=4, sep=3.0, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n_per, dim)) * 0.3
    b = rng.normal(size=(n_per, dim)) * 0.3 + sep / np.sqrt(dim)
    return np.vstack([a, b]), np.repeat([0, 1], n_per)


def ten_node_problem(seed=0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(size=(5, 3)) * 0.4, rng.normal(size=(5, 3)) * 0.4 + 1.0])
    g = knn_graph(X, 3)
    labels = np.full(10, hgcn.UNLABELED)
    labels[[0, 1, 5, 6]] = [0, 0, 1, 1]
    return X, g, hgcn.LabelSet(labels, 2)


class TestLinear:
    def test_identity_weights(self):
        rng = np.random.default_rng(0)
        for k in (0.5, 1.0, 2.0):
            x = lift(rng.normal(size=4), k)
            y = hgcn.hgcn_linear(x, np.eye(4), np.zeros(4), k)
            np.testing.assert_allclose(y.coords, x.coords, atol=1e-9)

    def test_on_manifold(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            k = rng.uniform(0.3, 3)
            x = lift(rng.normal(size=3), k)
            y = hgcn.hgcn_linear(x, rng.normal(size=(5, 3)), rng.normal(size=5), k)
            assert abs(hyp.minkowski_inner(y.coords, y.coords) + k) < 1e-9

    def test_matches_stepwise_composition(self):
        rng = np.random.default_rng(2)
        k = 1.7
        x = lift(rng.normal(size=3) * 0.5, k)
        W, b = rng.normal(size=(4, 3)) * 0.5, rng.normal(size=4) * 0.3
        o3, o4 = HPoint.origin(3, k), HPoint.origin(4, k)
        v = hyp.log_map(o3, x).vec[1:]
        h = hyp.exp_map(HTangent(o4, np.concatenate([[0.0], W @ v])))
        u = hyp.log_map(o4, h).vec[1:] + b
        expected = hyp.exp_map(HTangent(o4, np.concatenate([[0.0], u])))
        got = hgcn.hgcn_linear(x, W, b, k)
        np.testing.assert_allclose(got.coords, expected.coords, rtol=1e-10, atol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="do not fit"):
            hgcn.hgcn_linear(HPoint.origin(3), np.eye(2), np.zeros(2))


class TestAggregate:
    def test_all_equal_points(self):
        g = graph_from_edges(3, np.array([0, 0]), np.array([1, 2]))
        p = lift(np.array([0.3, -0.2]))
        out = hgcn.hgcn_aggregate(0, [p, p, p], g)
        np.testing.assert_allclose(out.coords, p.coords, atol=1e-12)

    def test_two_node_tangent_oracle(self):
        # deg = 2 for both nodes, so the self weight and the edge weight are 1/2
        g = graph_from_edges(2, np.array([0]), np.array([1]))
        a, b = lift(np.array([0.1, 0.2])), lift(np.array([1.0, -0.5]))
        out = hgcn.hgcn_aggregate(0, [a, b], g)
        expected = hyp.exp_map(HTangent(a, 0.5 * hyp.log_map(a, b).vec))
        np.testing.assert_allclose(out.coords, expected.coords, atol=1e-12)
        assert hyp.hdistance(a, out) == pytest.approx(0.5 * hyp.hdistance(a, b), rel=1e-10)

    def test_isolated_node_is_fixed(self):
        g = graph_from_edges(2, np.array([], dtype=int), np.array([], dtype=int))
        p = lift(np.array([0.4, 0.1]))
        np.testing.assert_allclose(hgcn.hgcn_aggregate(0, [p, lift(np.array([1.0, 1.0]))], g).coords, p.coords, atol=1e-12)

    def test_neighbour_order_irrelevant(self):
        rng = np.random.default_rng(3)
        pts = [lift(rng.normal(size=3)) for _ in range(5)]
        g = graph_from_edges(5, np.array([0, 0, 0, 0]), np.array([1, 2, 3, 4]))
        perm = np.array([0, 3, 1, 4, 2])
        gp = permute_graph(g, perm)
        out = hgcn.hgcn_aggregate(0, pts, g)
        out_p = hgcn.hgcn_aggregate(0, [pts[i] for i in perm], gp)
        np.testing.assert_allclose(out.coords, out_p.coords, atol=1e-12)


class TestActivation:
    def test_relu_identity_on_nonnegative(self):
        x = lift(np.array([0.2, 0.0, 1.3]))
        np.testing.assert_allclose(hgcn.hgcn_activation(x, 1.0, 1.0).coords, x.coords, atol=1e-8)

    def test_negative_coordinates_zeroed(self):
        x = lift(np.array([0.5, -0.7, 0.2]), 1.3)
        y = hgcn.hgcn_activation(x, 1.3, 0.6)
        tangent = hyp.log_map(HPoint.origin(3, 0.6), y).vec[1:]
        ref = np.maximum(hyp.log_map(HPoint.origin(3, 1.3), x).vec[1:], 0.0)
        np.testing.assert_allclose(tangent, ref, atol=1e-10)
        assert abs(hyp.minkowski_inner(y.coords, y.coords) + 0.6) < 1e-9

    def test_curvature_check(self):
        with pytest.raises(ValueError):
            hgcn.hgcn_activation(HPoint.origin(2, 1.0), 2.0, 1.0)


class TestForward:
    def test_zero_input_uniform_logits(self):
        X = np.zeros((6, 3))
        g = knn_graph(np.random.default_rng(0).normal(size=(6, 3)), 2)
        p = hgcn.init_params(3, 4, hidden=5, out_bias=0.0)
        logits = hgcn.hgcn_forward(p, g, X)
        np.testing.assert_allclose(logits, logits[0, 0], atol=1e-12)

    def test_single_node_matches_composition(self):
        rng = np.random.default_rng(1)
        p = hgcn.init_params(3, 2, hidden=4, seed=1)
        x = rng.normal(size=3) * 0.5
        g = graph_from_edges(1, np.array([], dtype=int), np.array([], dtype=int))
        k0, k1, k2 = p.curvatures
        h = lift(x, k0)
        h = hgcn.hgcn_linear(h, p.weights[0], p.biases[0], k0)
        h = hgcn.hgcn_activation(h, k0, k1)
        h = hgcn.hgcn_linear(h, p.weights[1], p.biases[1], k1)
        h = hgcn.hgcn_activation(h, k1, k2)
        expected = hgcn.LOGIT_SCALE * hyp.log_map(HPoint.origin(2, k2), h).vec[1:]
        np.testing.assert_allclose(hgcn.hgcn_forward(p, g, x[None]), expected[None], atol=1e-10)

    def test_deterministic(self):
        X, g, _ = ten_node_problem()
        p = hgcn.init_params(3, 2)
        np.testing.assert_array_equal(hgcn.hgcn_forward(p, g, X), hgcn.hgcn_forward(p, g, X))

    def test_permutation_equivariance(self):
        X, g, _ = ten_node_problem()
        p = hgcn.init_params(3, 2, hidden=6, seed=4)
        perm = np.random.default_rng(5).permutation(10)
        out = hgcn.hgcn_forward(p, g, X)
        out_p = hgcn.hgcn_forward(p, permute_graph(g, perm), X[perm])
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_trace_stays_on_manifold(self):
        X, g, _ = ten_node_problem()
        trace = []
        hgcn.hgcn_forward(hgcn.init_params(3, 2), g, X, trace=trace)
        assert len(trace) == 7
        for _, k, x in trace:
            assert hyp.constraint_residual(x, k).max() < 1e-9

    def test_shape_check(self):
        X, g, _ = ten_node_problem()
        with pytest.raises(ValueError, match="expected"):
            hgcn.hgcn_forward(hgcn.init_params(4, 2), g, X)


class TestTraining:
    def test_gradient_matches_finite_differences(self):
        X, g, seeds = ten_node_problem()
        p = hgcn.init_params(3, 2, hidden=4, seed=2)
        _, grads = hgcn.loss_and_grad(p, g, X, seeds, weight_decay=1e-3)
        raw = [r.numpy().copy() for r in hgcn.to_raw(p)]
        h = 1e-6
        for t, (r, gr) in enumerate(zip(raw, grads)):
            num = np.zeros_like(r)
            for idx in np.ndindex(r.shape):
                plus = [a.copy() for a in raw]
                minus = [a.copy() for a in raw]
                plus[t][idx] += h
                minus[t][idx] -= h
                num[idx] = (hgcn.raw_loss(plus, 2, g, X, seeds, 1e-3) - hgcn.raw_loss(minus, 2, g, X, seeds, 1e-3)) / (2 * h)
            # central differences carry ~eps * loss / h of rounding noise, which
            # matters for tensors whose true gradient is zero
            scale = max(np.linalg.norm(num), np.linalg.norm(gr))
            assert np.linalg.norm(num - gr) < 1e-4 * scale + 1e-9, f"parameter tensor {t}"

    def test_zero_epochs(self):
        X, g, seeds = ten_node_problem()
        p0 = hgcn.init_params(3, 2)
        p, hist = hgcn.hgcn_train(g, X, seeds, hgcn.TrainConfig(epochs=0), params=p0)
        assert len(hist) == 1
        for a, b in zip(p.weights, p0.weights):
            np.testing.assert_array_equal(a, b)

    def test_two_blobs(self):
        X, truth = two_blobs()
        g = knn_graph(X, 3)
        labels = np.full(len(X), hgcn.UNLABELED)
        labels[0], labels[30] = 0, 1
        params, hist = hgcn.hgcn_train(g, X, hgcn.LabelSet(labels, 2), hgcn.TrainConfig(lr=0.1, epochs=200))
        assert (hgcn.hgcn_predict(params, g, X) == truth).mean() >= 0.95
        assert hist[-1] < hist[0]

    def test_loss_non_increasing_in_windows(self):
        X, truth = two_blobs(seed=1)
        g = knn_graph(X, 3)
        labels = np.full(len(X), hgcn.UNLABELED)
        labels[0], labels[30] = 0, 1
        _, hist = hgcn.hgcn_train(g, X, hgcn.LabelSet(labels, 2), hgcn.TrainConfig(lr=0.1, epochs=100))
        for s in range(0, 100, 10):
            assert hist[s + 10] <= hist[s]

    def test_divergence_reported(self):
        X, g, seeds = ten_node_problem()
        with pytest.raises(hgcn.TrainingDiverged, match="lower the learning rate"):
            hgcn.hgcn_train(g, X * 1e3, seeds, hgcn.TrainConfig(lr=1e6, epochs=50))

    def test_curvatures_stay_positive(self):
        X, g, seeds = ten_node_problem()
        params, _ = hgcn.hgcn_train(g, X, seeds, hgcn.TrainConfig(lr=0.5, epochs=30))
        assert all(k > 0 for k in params.curvatures)


class TestLabelsAndCentroids:
    def test_label_set_requires_every_class(self):
        with pytest.raises(ValueError, match="without a labelled node"):
            hgcn.LabelSet(np.array([0, -1, -1]), 2)

    def test_seed_labels_all_rows(self):
        X = np.random.default_rng(0).normal(size=(7, 2))
        seeds = hgcn.seed_labels(X, 7, start=0)
        assert sorted(seeds.labels.tolist()) == list(range(7))

    def test_farthest_point_second_seed(self):
        X = np.random.default_rng(1).normal(size=(20, 3))
        seeds = hgcn.seed_labels(X, 3, start=4)
        D = ((X[:, None] - X[None]) ** 2).sum(-1)
        assert seeds.labels[4] == 0
        assert seeds.labels[int(np.argmax(D[4]))] == 1

    def test_seed_labels_deterministic(self):
        X = np.random.default_rng(2).normal(size=(30, 3))
        np.testing.assert_array_equal(hgcn.seed_labels(X, 5, seed=3).labels, hgcn.seed_labels(X, 5, seed=3).labels)

    def test_centroids_single_points(self):
        X = np.random.default_rng(3).normal(size=(4, 2))
        v = hgcn.extract_centroids(X, np.array([2, 0, 3, 1]))
        np.testing.assert_allclose(v.centroids, X[[1, 3, 0, 2]])

    def test_centroids_group_by_mean(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(50, 3))
        pred = rng.integers(0, 7, size=50)
        pred[pred == 5] = 6  # class 5 left empty
        v = hgcn.extract_centroids(X, pred)
        assert v.source_classes.tolist() == [0, 1, 2, 3, 4, 6]
        for j, c in enumerate(v.source_classes):
            np.testing.assert_allclose(v.centroids[j], X[pred == c].mean(axis=0), atol=1e-12)
        # every centroid quantises to itself
        for j in range(v.size):
            assert quantize(v.centroids[j], v) == j


class TestPersistence:
    def test_params_round_trip(self, tmp_path):
        p = hgcn.init_params(5, 3, hidden=4, seed=9)
        hgcn.save_params(p, tmp_path / "p.bin")
        q = hgcn.load_params(tmp_path / "p.bin")
        for a, b in zip(p.weights + p.biases, q.weights + q.biases):
            np.testing.assert_array_equal(a, b)
        assert p.curvatures == q.curvatures

    def test_training_log(self, tmp_path):
        hgcn.save_training_log([1.5, 1.25], tmp_path / "log.csv")
        assert (tmp_path / "log.csv").read_text().splitlines() == ["epoch,loss", "0,1.5", "1,1.25"]


def test_graph_tensor_uses_normalised_weights():
    X, g, _ = ten_node_problem()
    rows, cols, w = hgcn._graph_tensors(g)
    gn = normalize_adjacency(g)
    assert torch.allclose(w[-10:], torch.as_tensor(gn.self_weights))
