import numpy as np
import pytest

from posefield.gradcheck import finite_difference_check
from posefield.tensor import Tensor
from posefield.window import WindowConfig, WindowStage, reweight_positions, spatial_window


def make_stage(mode="full", rng=None, n_parts=5):
    return WindowStage(
        n_parts,
        feature_dim=8,
        coord_features=8,
        part_feature_dim=8,
        gate_hidden=8,
        freq_hidden=8,
        n_layers=2,
        layer_width=6,
        bandwidth=3.0,
        config=WindowConfig(mode=mode),
        rng=rng or np.random.default_rng(0),
    )


def all_valid(n, p):
    return np.ones((n, p), dtype=bool)


class TestSpatialWindow:
    def test_unit_weight_at_part_center(self):
        xbar = Tensor(np.zeros((3, 2, 3)))
        wp = spatial_window(xbar, all_valid(3, 2))
        assert np.array_equal(wp.data, np.ones((3, 2)))

    def test_closed_form_at_unit_radius(self):
        xbar = Tensor(np.array([[[1.0, 0.0, 0.0]]]))
        wp = spatial_window(xbar, all_valid(1, 1))
        assert wp.data[0, 0] == pytest.approx(np.exp(-2.0), abs=1e-12)

    def test_strictly_decreasing_along_radial_sweep(self, rng):
        for _ in range(20):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            radii = np.linspace(0.01, 2.0, 50)
            xbar = Tensor((radii[:, None] * direction)[None])
            wp = spatial_window(xbar, all_valid(1, 50)).data[0]
            assert np.all(np.diff(wp) < 0)

    def test_invalid_parts_zeroed(self):
        xbar = Tensor(np.zeros((2, 1, 3)))
        valid = np.array([[True], [False]])
        wp = spatial_window(xbar, valid)
        assert wp.data[0, 0] == 1.0 and wp.data[1, 0] == 0.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            WindowConfig(alpha=-1.0)
        with pytest.raises(ValueError):
            WindowConfig(mode="sideways")


class TestPartPointFeatures:
    def test_zero_coord_weights_give_zero_encoding(self, rng):
        stage = make_stage()
        stage.params["coord_w"].data[...] = 0.0
        xbar = Tensor(rng.uniform(-1, 1, size=(5, 4, 3)))
        g = Tensor(rng.normal(size=(5, 8)))
        wp = stage.spatial_window(xbar, all_valid(5, 4))
        xdot, _, _ = stage.part_point_features(xbar, g, wp)
        assert np.array_equal(xdot.data, np.zeros((5, 4, 8)))

    def test_invalid_part_features_fully_attenuated(self, rng):
        stage = make_stage()
        xbar = Tensor(rng.uniform(-0.5, 0.5, size=(5, 3, 3)))
        valid = all_valid(5, 3)
        valid[2] = False
        wp = stage.spatial_window(xbar, valid)
        _, _, fw = stage.part_point_features(xbar, Tensor(rng.normal(size=(5, 8))), wp)
        assert np.array_equal(fw.data[2], np.zeros((3, 8)))

    def test_sine_encoding_is_odd(self, rng):
        stage = make_stage()
        x = rng.uniform(-0.8, 0.8, size=3)
        xbar = Tensor(np.stack([x, -x])[None])
        wp = stage.spatial_window(xbar, all_valid(1, 2))
        xdot, _, _ = stage.part_point_features(xbar, Tensor(rng.normal(size=(1, 8))), wp)
        assert np.allclose(xdot.data[0, 0], -xdot.data[0, 1], atol=1e-15)

    def test_xdot_bounded(self, rng):
        stage = make_stage()
        xbar = Tensor(rng.uniform(-1, 1, size=(5, 50, 3)))
        wp = stage.spatial_window(xbar, all_valid(5, 50))
        xdot, _, _ = stage.part_point_features(xbar, Tensor(rng.normal(size=(5, 8))), wp)
        assert np.all(np.abs(xdot.data) <= 1.0)


class TestFeatureWindow:
    def test_output_strictly_inside_unit_interval(self, rng):
        stage = make_stage()
        fw = Tensor(rng.normal(0, 3, size=(5, 20, 8)))
        wf = stage.feature_window(fw).data
        assert np.all(wf > 0.0) and np.all(wf < 1.0)

    def test_duplicating_dominant_part_leaves_gate_unchanged(self, rng):
        stage = make_stage()
        feats = rng.normal(size=(5, 4, 8))
        feats[1] = np.abs(feats).max() + 1.0  # part 1 dominates every channel
        wf0 = stage.feature_window(Tensor(feats)).data
        feats2 = feats.copy()
        feats2[3] = feats[1]  # duplicate the maximum
        wf1 = stage.feature_window(Tensor(feats2)).data
        assert np.array_equal(wf0, wf1)

    def test_gradient_routes_only_to_pooled_argmax(self, rng):
        stage = make_stage()
        feats = rng.normal(size=(3, 2, 8))
        feats[0] += 10.0  # part 0 wins every channel
        fw = Tensor(feats, requires_grad=True)
        stage.feature_window(fw).sum().backward()
        assert np.abs(fw.grad[0]).max() > 0
        assert np.array_equal(fw.grad[1:], np.zeros((2, 2, 8)))


class TestAggregation:
    def test_all_zero_weights_give_pose_independent_frequencies(self, rng):
        stage = make_stage()
        w = Tensor(np.zeros((5, 3)))
        f_m1, th1 = stage.aggregate_and_predict(w, Tensor(rng.normal(size=(5, 8))))
        f_m2, th2 = stage.aggregate_and_predict(w, Tensor(rng.normal(size=(5, 8))))
        assert np.array_equal(f_m1.data, np.zeros((3, 8)))
        for a, b in zip(th1, th2):
            assert np.array_equal(a.data, b.data)

    def test_one_hot_weight_selects_bone_feature(self, rng):
        stage = make_stage()
        g = rng.normal(size=(5, 8))
        w = np.zeros((5, 1))
        w[3] = 1.0
        f_m, _ = stage.aggregate_and_predict(Tensor(w), Tensor(g))
        assert np.allclose(f_m.data[0], g[3], atol=1e-15)

    def test_permutation_invariance_of_aggregate(self, rng):
        stage = make_stage()
        g = rng.normal(size=(5, 8))
        w = rng.uniform(0, 1, size=(5, 4))
        perm = rng.permutation(5)
        a = stage.aggregate(Tensor(w), Tensor(g)).data
        b = stage.aggregate(Tensor(w[perm]), Tensor(g[perm])).data
        assert np.allclose(a, b, atol=1e-12)

    def test_theta_depends_on_pose_through_features(self, rng):
        stage = make_stage()
        w = Tensor(rng.uniform(0.2, 1.0, size=(5, 3)))
        g = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        _, thetas = stage.aggregate_and_predict(w, g)
        Tensor.concat(thetas, axis=-1).sum().backward()
        assert np.abs(g.grad).max() > 1e-8

    def test_theta_initialized_near_one(self, rng):
        stage = make_stage(rng=np.random.default_rng(5))
        w = Tensor(rng.uniform(0, 1, size=(5, 10)))
        _, thetas = stage.aggregate_and_predict(w, Tensor(rng.normal(size=(5, 8))))
        for th in thetas:
            assert np.abs(th.data - 1.0).max() < 0.1

    def test_scalar_theta_mode_broadcasts(self, rng):
        stage = WindowStage(5, feature_dim=8, coord_features=8, part_feature_dim=8, gate_hidden=8,
                            freq_hidden=8, n_layers=2, layer_width=6, theta_per_channel=False,
                            rng=np.random.default_rng(1))
        _, thetas = stage.aggregate_and_predict(Tensor(rng.uniform(0, 1, size=(5, 4))), Tensor(rng.normal(size=(5, 8))))
        for th in thetas:
            assert th.shape == (4, 6)
            assert np.allclose(th.data, th.data[:, :1], atol=0)


class TestModesAndReweight:
    def test_weight_bounds_and_invalid_zeros_in_every_mode(self, rng):
        valid = all_valid(5, 6)
        valid[1, :3] = False
        xbar = Tensor(rng.uniform(-0.9, 0.9, size=(5, 6, 3)))
        g = Tensor(rng.normal(size=(5, 8)))
        for mode in ("full", "only_spatial", "only_feature", "no_window"):
            stage = make_stage(mode)
            wp = stage.spatial_window(xbar, valid)
            _, _, fw = stage.part_point_features(xbar, g, wp)
            wf = stage.feature_window(fw)
            w = stage.combine(wp, wf, valid).data
            assert np.all(w >= 0.0) and np.all(w <= 1.0)
            assert np.array_equal(w[1, :3], np.zeros(3))

    def test_mode_algebra(self, rng):
        valid = all_valid(5, 4)
        xbar = Tensor(rng.uniform(-0.9, 0.9, size=(5, 4, 3)))
        g = Tensor(rng.normal(size=(5, 8)))
        stage = make_stage("full")
        wp = stage.spatial_window(xbar, valid)
        _, _, fw = stage.part_point_features(xbar, g, wp)
        wf = stage.feature_window(fw)
        full = stage.combine(wp, wf, valid).data
        assert np.allclose(full, wp.data * wf.data, atol=1e-15)
        stage.config.mode = "only_spatial"
        assert np.array_equal(stage.combine(wp, wf, valid).data, wp.data)
        stage.config.mode = "only_feature"
        assert np.array_equal(stage.combine(wp, wf, valid).data, wf.data)
        stage.config.mode = "no_window"
        assert np.array_equal(stage.combine(wp, wf, valid).data, np.ones((5, 4)))

    def test_reweight_identities(self, rng):
        xbar = Tensor(rng.uniform(-1, 1, size=(3, 4, 3)))
        ones = Tensor(np.ones((3, 4)))
        zeros = Tensor(np.zeros((3, 4)))
        assert np.array_equal(reweight_positions(xbar, ones).data, xbar.data)
        assert np.array_equal(reweight_positions(xbar, zeros).data, np.zeros((3, 4, 3)))
        w = Tensor(rng.uniform(0, 1, size=(3, 4)))
        half = reweight_positions(xbar, w * 0.5).data
        assert np.allclose(half, 0.5 * reweight_positions(xbar, w).data, atol=1e-15)

    def test_end_to_end_gradients(self):
        from posefield.checks import check_window

        assert check_window() <= 1e-4


class TestPoseDependentFrequencies:
    """Same world point, different poses -> different modulation coefficients."""

    @staticmethod
    def _thetas(model, pose, point):
        from posefield.skeleton import forward_kinematics, to_relative

        transforms = forward_kinematics(model.topology, pose)
        g = model.encoder.encode(pose)
        rel = to_relative(point, transforms, model.scales)
        win = model.window
        wp = win.spatial_window(rel.xbar, rel.valid)
        _, _, fw = win.part_point_features(rel.xbar, g, wp)
        w = win.combine(wp, win.feature_window(fw), rel.valid)
        _, thetas = win.aggregate_and_predict(w, g)
        return Tensor.concat(thetas, axis=-1)

    def test_two_poses_give_distinct_theta_at_same_point(self):
        from posefield.model import AvatarModel, ModelConfig
        from posefield.synthetic import bent_pose, default_scene

        scene = default_scene()
        model = AvatarModel(ModelConfig(feature_dim=8, conv_hidden=8, coord_features=8, part_feature_dim=8,
                                        gate_hidden=8, freq_hidden=8, n_layers=2, hidden=8, seed=3),
                            scene.topology)
        point = np.array([[0.2, 0.3, 0.0]])
        t1 = self._thetas(model, Tensor(bent_pose(scene.topology, elbow=0.2)), point)
        t2 = self._thetas(model, Tensor(bent_pose(scene.topology, elbow=1.2)), point)
        assert np.abs(t1.data - t2.data).max() > 1e-6

    def test_theta_jacobian_wrt_pose_nonzero_and_correct(self, rng):
        from posefield.gradcheck import finite_difference_check
        from posefield.model import AvatarModel, ModelConfig
        from posefield.synthetic import bent_pose, default_scene

        scene = default_scene()
        model = AvatarModel(ModelConfig(feature_dim=8, conv_hidden=8, coord_features=8, part_feature_dim=8,
                                        gate_hidden=8, freq_hidden=8, n_layers=2, hidden=8, seed=3),
                            scene.topology)
        point = np.array([[0.2, 0.3, 0.0]])
        pose = Tensor(bent_pose(scene.topology, elbow=0.5, knee=0.4), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, size=(1, 16)))

        def fn(params):
            return (self._thetas(model, params["pose"], point) * proj).sum()

        loss = fn({"pose": pose})
        loss.backward()
        assert np.abs(pose.grad).max() > 1e-9
        pose.grad = None
        assert finite_difference_check(fn, {"pose": pose}) <= 1e-4
