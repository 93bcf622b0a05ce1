import numpy as np
import pytest

from posefield.gradcheck import finite_difference_check
from posefield.skeleton import (
    InvalidPoseError,
    PartScales,
    SchemaError,
    SkeletonTopology,
    forward_kinematics,
    identity_pose,
    load_poses,
    load_skeleton,
    rot6d_to_matrix,
    rot6d_to_matrix_np,
    rotation_to_6d,
    save_poses,
    save_skeleton,
    to_relative,
)
from posefield.tensor import Tensor


def two_bone_chain():
    return SkeletonTopology(("a", "b"), np.array([-1, 0]), np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]))


class TestRot6d:
    def test_canonical_frame_gives_identity(self):
        r = rot6d_to_matrix(Tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))
        assert np.allclose(r.data, np.eye(3), atol=1e-15)

    def test_hand_computed_90deg_about_z(self):
        r = rot6d_to_matrix(Tensor([0.0, 1.0, 0.0, -1.0, 0.0, 0.0]))
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert np.allclose(r.data, expected, atol=1e-15)

    def test_random_inputs_orthonormal_positive_determinant(self, rng):
        for _ in range(200):
            r = rot6d_to_matrix_np(rng.normal(size=6))
            assert np.allclose(r.T @ r, np.eye(3), atol=1e-9)
            assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)

    def test_degenerate_input_rejected(self):
        with pytest.raises(InvalidPoseError):
            rot6d_to_matrix(Tensor([1e-10, 0.0, 0.0, 0.0, 1.0, 0.0]))
        with pytest.raises(InvalidPoseError):
            rot6d_to_matrix(Tensor([1.0, 0.0, 0.0, 2.0, 1e-12, 0.0]))

    def test_continuity_along_parameter_path(self, rng):
        a = rng.normal(size=6)
        b = rng.normal(size=6)

        def max_step(n):
            ts = np.linspace(0.0, 1.0, n)
            rots = np.stack([rot6d_to_matrix_np((1 - t) * a + t * b) for t in ts])
            return np.linalg.norm(np.diff(rots, axis=0), axis=(1, 2)).max()

        coarse, fine = max_step(200), max_step(400)
        # O(eps) continuity: halving the parameter step halves the rotation step
        assert fine < 0.7 * coarse
        assert fine < 0.1

    def test_encode_decode_roundtrip(self, rng):
        r = rot6d_to_matrix_np(rng.normal(size=6))
        again = rot6d_to_matrix_np(rotation_to_6d(r))
        assert np.allclose(r, again, atol=1e-12)


class TestForwardKinematics:
    def test_single_root_identity(self):
        topo = SkeletonTopology(("root",), np.array([-1]), np.zeros((1, 3)))
        t = forward_kinematics(topo, identity_pose(1))
        assert np.allclose(t.rot[0].data, np.eye(3), atol=1e-15)
        assert np.allclose(t.trans[0].data, 0.0, atol=1e-15)

    def test_two_bone_chain_offsets_compose(self):
        t = forward_kinematics(two_bone_chain(), identity_pose(2))
        assert np.allclose(t.trans[1].data, [0.0, 2.0, 0.0], atol=1e-12)

    def test_matches_hand_composed_matrices(self):
        topo = two_bone_chain()
        rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        pose = rotation_to_6d(np.stack([rz, rz]))
        t = forward_kinematics(topo, pose)
        # root: R = rz, origin (0,1,0); child: R = rz rz, origin = rz(0,1,0)+(0,1,0)
        assert np.allclose(t.rot[0].data, rz, atol=1e-12)
        assert np.allclose(t.trans[1].data, rz @ [0.0, 1.0, 0.0] + [0.0, 1.0, 0.0], atol=1e-12)
        assert np.allclose(t.rot[1].data, rz @ rz, atol=1e-12)

    def test_world_to_bone_inverse_roundtrip(self, rng):
        topo = two_bone_chain()
        pose = identity_pose(2) + rng.normal(0, 0.3, size=(2, 6))
        t = forward_kinematics(topo, pose)
        mats = t.world_to_bone_matrices()
        x = rng.normal(size=3)
        for i in range(2):
            r, tr = t.rot[i].data, t.trans[i].data
            local = mats[i, :3, :3] @ x + mats[i, :3, 3]
            back = r @ local + tr
            assert np.allclose(back, x, atol=1e-12)

    def test_pose_shape_validated(self):
        with pytest.raises(InvalidPoseError):
            forward_kinematics(two_bone_chain(), identity_pose(3))


class TestRelativeCoords:
    def test_point_at_bone_origin_maps_to_zero(self):
        topo = two_bone_chain()
        t = forward_kinematics(topo, identity_pose(2))
        # bone origins sit at (0,1,0) and (0,2,0)
        rel = to_relative(np.array([[0.0, 1.0, 0.0], [0.0, 2.0, 0.0]]), t, PartScales(2))
        assert np.allclose(rel.xhat.data[0, 0], 0.0, atol=1e-15)
        assert np.allclose(rel.xbar.data[0, 0], 0.0, atol=1e-15)
        assert np.allclose(rel.xhat.data[1, 1], 0.0, atol=1e-15)
        assert rel.valid[0, 0] and rel.valid[1, 1] and rel.any_valid.all()

    def test_componentwise_scaling(self):
        topo = SkeletonTopology(("root",), np.array([-1]), np.zeros((1, 3)))
        t = forward_kinematics(topo, identity_pose(1))
        scales = Tensor(np.array([[0.4, 1.0, 1.0]]))
        rel = to_relative(np.array([[2.0, 0.0, 0.0]]), t, scales)
        assert np.allclose(rel.xbar.data[0, 0], [0.8, 0.0, 0.0], atol=1e-15)
        assert rel.valid[0, 0]

    def test_far_point_is_culled(self):
        topo = two_bone_chain()
        t = forward_kinematics(topo, identity_pose(2))
        rel = to_relative(np.array([[50.0, 0.0, 0.0]]), t, PartScales(2))
        assert not rel.any_valid[0]

    def test_validity_is_all_components_within_unit_box(self):
        topo = SkeletonTopology(("root",), np.array([-1]), np.zeros((1, 3)))
        t = forward_kinematics(topo, identity_pose(1))
        scales = Tensor(np.ones((1, 3)))
        rel = to_relative(np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 1.001]]), t, scales)
        assert rel.valid[0, 0] and not rel.valid[0, 1]

    def test_gradients_wrt_pose_and_scales(self, rng):
        topo = two_bone_chain()
        pose = Tensor(identity_pose(2) + rng.normal(0, 0.3, size=(2, 6)), requires_grad=True)
        log_s = Tensor(rng.normal(0, 0.2, size=(2, 3)), requires_grad=True)
        points = rng.uniform(-1, 1, size=(5, 3))
        proj = Tensor(rng.uniform(-1, 1, size=(2, 5, 3)))

        def fn(params):
            t = forward_kinematics(topo, params["pose"])
            rel = to_relative(points, t, params["log_s"].exp())
            return (rel.xbar * proj).sum()

        assert finite_difference_check(fn, {"pose": pose, "log_s": log_s}) <= 1e-4

    def test_scales_strictly_positive(self):
        s = PartScales(3, init=0.5)
        assert np.all(s.scales().data > 0)
        assert np.allclose(s.scales().data, 0.5)


class TestFiles:
    def test_skeleton_roundtrip(self, tmp_path):
        topo = two_bone_chain()
        path = tmp_path / "skel.json"
        save_skeleton(path, topo)
        loaded = load_skeleton(path)
        assert loaded.names == topo.names
        assert np.array_equal(loaded.parents, topo.parents)
        assert np.array_equal(loaded.rest_offsets, topo.rest_offsets)

    def test_skeleton_schema_violations(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"bones": [{"name": "a", "parent": "missing", "offset": [0,0,0]}]}')
        with pytest.raises(SchemaError):
            load_skeleton(path)
        path.write_text("not json")
        with pytest.raises(SchemaError):
            load_skeleton(path)
        path.write_text('{"bones": [{"name": "a", "parent": null, "offset": [0,0]}]}')
        with pytest.raises(SchemaError):
            load_skeleton(path)

    def test_two_roots_rejected(self):
        with pytest.raises(SchemaError):
            SkeletonTopology(("a", "b"), np.array([-1, -1]), np.zeros((2, 3)))

    def test_child_before_parent_rejected(self):
        with pytest.raises(SchemaError):
            SkeletonTopology(("a", "b"), np.array([1, -1]), np.zeros((2, 3)))

    def test_poses_roundtrip(self, tmp_path, rng):
        poses = rng.normal(size=(4, 2, 6))
        path = tmp_path / "poses.json"
        save_poses(path, poses)
        assert np.allclose(load_poses(path), poses, atol=1e-15)

    def test_poses_schema(self, tmp_path):
        path = tmp_path / "poses.json"
        path.write_text('{"poses": [[[1, 2, 3]]]}')
        with pytest.raises(SchemaError):
            load_poses(path)
