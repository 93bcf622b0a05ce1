import numpy as np
import pytest

from posefield.gradcheck import finite_difference_check
from posefield.pose_encoder import PoseEncoder, neighbor_mean_matrix
from posefield.skeleton import SkeletonTopology, identity_pose
from posefield.tensor import Tensor


def path_graph(n):
    return SkeletonTopology(tuple(f"b{i}" for i in range(n)), np.arange(-1, n - 1), np.zeros((n, 3)))


class TestAdjacency:
    def test_neighbor_mean_rows_sum_to_one(self):
        m = neighbor_mean_matrix(path_graph(5))
        assert np.allclose(m.sum(axis=1), 1.0)

    def test_underlying_graph_undirected(self):
        m = neighbor_mean_matrix(path_graph(4))
        assert np.array_equal(m > 0, (m > 0).T)


class TestEncode:
    def test_zero_weights_give_zero_features(self):
        enc = PoseEncoder(path_graph(4), feature_dim=8, hidden=8)
        for t in enc.params.values():
            t.data[...] = 0.0
        g = enc.encode(identity_pose(4))
        assert np.array_equal(g.data, np.zeros((4, 8)))

    def test_output_shape(self, rng):
        enc = PoseEncoder(path_graph(6), feature_dim=16, hidden=8)
        g = enc.encode(rng.normal(size=(6, 6)))
        assert g.shape == (6, 16)

    def test_two_hop_locality_on_path_graph(self, rng):
        n = 7
        enc = PoseEncoder(path_graph(n), feature_dim=8, hidden=8, rng=rng)
        base = rng.normal(size=(n, 6))
        g0 = enc.encode(base).data
        perturbed = base.copy()
        j = 0
        perturbed[j] += 0.5
        g1 = enc.encode(perturbed).data
        changed = np.abs(g1 - g0).max(axis=1) > 1e-12
        dist = np.abs(np.arange(n) - j)
        assert changed[dist <= 2].all()
        assert not changed[dist > 2].any()

    def test_per_node_weight_swap_touches_only_those_nodes(self, rng):
        n = 5
        enc = PoseEncoder(path_graph(n), feature_dim=8, hidden=8, rng=rng)
        pose = rng.normal(size=(n, 6))
        g0 = enc.encode(pose).data
        for name in ("w1", "b1", "w2", "b2"):
            a, b = enc.params[f"node1_{name}"], enc.params[f"node3_{name}"]
            a.data, b.data = b.data.copy(), a.data.copy()
        g1 = enc.encode(pose).data
        assert np.array_equal(g0[[0, 2, 4]], g1[[0, 2, 4]])
        assert np.abs(g1[1] - g0[1]).max() > 1e-9
        assert np.abs(g1[3] - g0[3]).max() > 1e-9

    def test_deterministic(self, rng):
        enc = PoseEncoder(path_graph(3), rng=np.random.default_rng(0))
        pose = rng.normal(size=(3, 6))
        assert np.array_equal(enc.encode(pose).data, enc.encode(pose).data)

    def test_gradients_match_finite_differences(self, rng):
        enc = PoseEncoder(path_graph(4), feature_dim=6, hidden=6, rng=np.random.default_rng(2))
        pose = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, size=(4, 6)))

        def fn(params):
            return (enc.encode(params["pose"]) * proj).sum()

        err = finite_difference_check(fn, {"pose": pose, **enc.params}, max_probes_per_param=6)
        assert err <= 1e-4
