import numpy as np
import pytest

from legs4.attention import NeighborGraph, attend, attend_backward, knn

from reference import central_difference, relative_error


class TestKnn:
    def test_collinear_example(self):
        means = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
        graph = knn(means, k=2)
        np.testing.assert_array_equal(graph.indices[1], [1, 0])
        np.testing.assert_array_equal(graph.indices[0], [0, 1])
        np.testing.assert_array_equal(graph.indices[2], [2, 1])

    def test_single_gaussian(self):
        graph = knn(np.zeros((1, 3)), k=20)
        np.testing.assert_array_equal(graph.indices, [[0]])

    def test_k_clamped_to_population(self):
        graph = knn(np.random.default_rng(0).normal(size=(5, 3)), k=20)
        assert graph.indices.shape == (5, 5)
        assert sorted(graph.indices[2]) == [0, 1, 2, 3, 4]

    def test_self_always_first(self, rng):
        graph = knn(rng.normal(size=(40, 3)), k=7)
        np.testing.assert_array_equal(graph.indices[:, 0], np.arange(40))

    def test_distance_ties_broken_by_index(self):
        means = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
        graph = knn(means, k=3)
        # for row 2 both coincident points are at distance 1; lower index wins first
        np.testing.assert_array_equal(graph.indices[2], [2, 0, 1])

    def test_matches_naive_sort(self, rng):
        means = rng.normal(size=(30, 3))
        graph = knn(means, k=6, chunk=7)
        for i in range(30):
            d2 = np.sum((means - means[i]) ** 2, axis=1)
            others = sorted((d2[j], j) for j in range(30) if j != i)
            expected = [i] + [j for _, j in others[:5]]
            np.testing.assert_array_equal(graph.indices[i], expected)

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            knn(np.zeros((3, 3)), k=0)


class TestAttend:
    def test_two_point_logit_example(self):
        # d=1: self feature 1.0, neighbor 0.0 -> logits (1, 0), so the self
        # weight is e/(e+1) and the output equals it
        feats = np.array([[1.0], [0.0]])
        graph = NeighborGraph(indices=np.array([[0, 1], [1, 0]]))
        out, _ = attend(feats, graph)
        np.testing.assert_allclose(out[0, 0], np.e / (np.e + 1.0), rtol=1e-12)

    def test_identical_features_are_fixed_point(self, rng):
        feats = np.tile(rng.normal(size=(1, 5)), (8, 1))
        graph = knn(rng.normal(size=(8, 3)), k=4)
        out, _ = attend(feats, graph)
        np.testing.assert_allclose(out, feats, rtol=1e-12)

    def test_self_only_graph_is_identity(self, rng):
        feats = rng.normal(size=(6, 4))
        graph = NeighborGraph(indices=np.arange(6, dtype=np.int64)[:, None])
        out, _ = attend(feats, graph)
        np.testing.assert_allclose(out, feats, rtol=1e-12)

    def test_weights_are_convex_combination(self, rng):
        feats = rng.normal(size=(20, 6))
        graph = knn(rng.normal(size=(20, 3)), k=5)
        _, (_, _, w) = attend(feats, graph)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-12)

    def test_row_count_mismatch(self, rng):
        graph = knn(rng.normal(size=(5, 3)), k=2)
        with pytest.raises(ValueError, match="row count"):
            attend(rng.normal(size=(4, 2)), graph)

    def test_permutation_equivariance(self, rng):
        means = rng.normal(size=(12, 3))
        feats = rng.normal(size=(12, 4))
        out, _ = attend(feats, knn(means, k=4))
        perm = rng.permutation(12)
        out_p, _ = attend(feats[perm], knn(means[perm], k=4))
        np.testing.assert_allclose(out_p, out[perm], atol=1e-10)


class TestAttendBackward:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        m, d = 6, 3
        feats = rng.normal(size=(m, d))
        graph = knn(rng.normal(size=(m, 3)), k=4)
        g = rng.normal(size=(m, d))

        def loss(f):
            out, _ = attend(f, graph)
            return float(np.sum(out * g))

        _, cache = attend(feats, graph)
        analytic = attend_backward(cache, g)
        fd = central_difference(loss, feats, h=1e-6)
        assert relative_error(analytic, fd) <= 1e-7
