"""Skeleton topology, 6-D rotations, forward kinematics, bone-relative coords.

Bones form a forest (exactly one root here) ordered so parents precede
children. A pose is one 6-D rotation parameter vector per bone; the 6 numbers
are two 3-vectors that Gram-Schmidt turns into the first two columns of a
rotation matrix. Rest offsets are the bone origin in the parent frame (world
frame for the root).

Everything that must be differentiated (rotations, kinematics, the scaled
relative coordinates) is written in Tensor ops; numpy convenience wrappers
evaluate the same code under no_grad.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, no_grad


class SchemaError(ValueError):
    """A structured input file violates its documented schema."""


class InvalidPoseError(ValueError):
    """Degenerate 6-D rotation input (near-zero or parallel vectors)."""


@dataclass(frozen=True)
class SkeletonTopology:
    names: tuple
    parents: np.ndarray  # int, -1 for the root
    rest_offsets: np.ndarray  # (N, 3) in parent frame; world frame for the root

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=int)
        offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", offsets)
        n = len(self.names)
        if parents.shape != (n,) or offsets.shape != (n, 3):
            raise SchemaError("topology arrays disagree with bone count")
        if (parents == -1).sum() != 1:
            raise SchemaError("skeleton must have exactly one root")
        for i, p in enumerate(parents):
            if p >= i:
                raise SchemaError("bones must be ordered parent-before-child")
            if p < -1:
                raise SchemaError(f"bad parent index {p}")

    @property
    def bone_count(self) -> int:
        return len(self.names)

    def neighbors(self):
        """Undirected adjacency lists (parent-child edges)."""
        nbrs = [[] for _ in range(self.bone_count)]
        for i, p in enumerate(self.parents):
            if p >= 0:
                nbrs[i].append(p)
                nbrs[p].append(i)
        return nbrs


def identity_pose(n_bones: int) -> np.ndarray:
    """The 6-D encoding of the identity rotation for every bone."""
    pose = np.zeros((n_bones, 6))
    pose[:, 0] = 1.0
    pose[:, 4] = 1.0
    return pose


def rotation_to_6d(rot: np.ndarray) -> np.ndarray:
    """Encode rotation matrices (..., 3, 3) as their first two columns."""
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def _cross(a: Tensor, b: Tensor) -> Tensor:
    return Tensor.stack(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def rot6d_to_matrix(omega: Tensor) -> Tensor:
    """Gram-Schmidt a 6-vector into a rotation matrix (columns b1, b2, b1xb2)."""
    omega = Tensor._coerce(omega)
    a1 = omega[0:3]
    a2 = omega[3:6]
    n1 = a1.norm()
    if n1.item() < 1e-8:
        raise InvalidPoseError("first rotation vector is near zero")
    b1 = a1 / n1
    u2 = a2 - (b1 * a2).sum() * b1
    n2 = u2.norm()
    if n2.item() < 1e-8:
        raise InvalidPoseError("rotation vectors are near parallel")
    b2 = u2 / n2
    b3 = _cross(b1, b2)
    return Tensor.stack([b1, b2, b3], axis=1)


def rot6d_to_matrix_np(omega: np.ndarray) -> np.ndarray:
    """Batched numpy version of rot6d_to_matrix for (..., 6) inputs."""
    omega = np.asarray(omega, dtype=np.float64)
    a1, a2 = omega[..., 0:3], omega[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < 1e-8):
        raise InvalidPoseError("first rotation vector is near zero")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < 1e-8):
        raise InvalidPoseError("rotation vectors are near parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


@dataclass
class BoneTransforms:
    """Rigid bone-to-world transforms plus their inverses, as Tensor pairs."""

    rot: list  # bone-to-world rotation, (3, 3) each
    trans: list  # bone origin in world, (3,) each

    @property
    def bone_count(self):
        return len(self.rot)

    def world_to_bone_matrices(self) -> np.ndarray:
        """4x4 world-to-bone matrices as numpy (for files and tests)."""
        out = np.zeros((self.bone_count, 4, 4))
        for i, (r, t) in enumerate(zip(self.rot, self.trans)):
            rt = r.data.T
            out[i, :3, :3] = rt
            out[i, :3, 3] = -rt @ t.data
            out[i, 3, 3] = 1.0
        return out

    def joint_positions(self) -> np.ndarray:
        return np.stack([t.data for t in self.trans])


def forward_kinematics(topology: SkeletonTopology, pose) -> BoneTransforms:
    """Compose bone-to-world transforms root-to-leaf.

    `pose` is an (N, 6) Tensor or array; gradients flow through to it when it
    is a Tensor with requires_grad.
    """
    pose = Tensor._coerce(pose)
    if pose.shape != (topology.bone_count, 6):
        raise InvalidPoseError(f"pose shape {pose.shape} does not match {topology.bone_count} bones")
    rots, trans = [], []
    for i in range(topology.bone_count):
        r_local = rot6d_to_matrix(pose[i])
        offset = Tensor(topology.rest_offsets[i])
        p = topology.parents[i]
        if p < 0:
            rots.append(r_local)
            trans.append(offset)
        else:
            rots.append(rots[p] @ r_local)
            trans.append((rots[p] @ offset.reshape(3, 1)).reshape(3) + trans[p])
    return BoneTransforms(rots, trans)


def fk_numpy(topology: SkeletonTopology, pose: np.ndarray):
    """(rot (N,3,3), trans (N,3)) bone-to-world, computed without a graph."""
    with no_grad():
        t = forward_kinematics(topology, np.asarray(pose, dtype=np.float64))
    return np.stack([r.data for r in t.rot]), np.stack([x.data for x in t.trans])


def bend_angles(topology: SkeletonTopology, pose: np.ndarray) -> np.ndarray:
    """Geodesic angle of each bone's local rotation relative to its parent.

    The root has no parent and gets angle 0.
    """
    rots = rot6d_to_matrix_np(np.asarray(pose, dtype=np.float64))
    tr = np.trace(rots, axis1=-2, axis2=-1)
    ang = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
    ang[topology.parents < 0] = 0.0
    return ang


class PartScales:
    """Per-bone, per-axis positive scale factors, stored in log space.

    Initialized to 0.5 per axis so the [-1,1] validity boxes start at world
    half-extent 2 and overlap generously; the volume penalty shrinks the
    scale products during training.
    """

    def __init__(self, n_bones: int, init: float = 0.5):
        self.log_s = Tensor(np.full((n_bones, 3), np.log(init)), requires_grad=True)

    def scales(self) -> Tensor:
        return self.log_s.exp()


@dataclass
class RelativeCoords:
    xhat: Tensor  # (N, P, 3) unscaled bone-relative coordinates
    xbar: Tensor  # (N, P, 3) scaled coordinates
    valid: np.ndarray  # (N, P) bool: all three |xbar| components <= 1
    any_valid: np.ndarray  # (P,) bool


def to_relative(points, transforms: BoneTransforms, scales) -> RelativeCoords:
    """Map world points into every bone's scaled local frame, flag validity.

    `scales` is a PartScales or an (N, 3) Tensor of positive factors.
    Differentiable in the points, the pose (through `transforms`) and the
    scales; the validity flags themselves are hard booleans.
    """
    x = Tensor._coerce(points)
    per_bone = []
    for r, t in zip(transforms.rot, transforms.trans):
        per_bone.append((x - t) @ r)  # row form of R^T (x - t)
    xhat = Tensor.stack(per_bone, axis=0)
    s = scales.scales() if isinstance(scales, PartScales) else Tensor._coerce(scales)
    n = xhat.shape[0]
    xbar = xhat * s.reshape(n, 1, 3)
    valid = np.all(np.abs(xbar.data) <= 1.0, axis=-1)
    return RelativeCoords(xhat, xbar, valid, valid.any(axis=0))


# -- file formats ---------------------------------------------------------------


def save_skeleton(path, topology: SkeletonTopology) -> None:
    bones = []
    for i, name in enumerate(topology.names):
        p = topology.parents[i]
        bones.append(
            {
                "name": name,
                "parent": None if p < 0 else topology.names[p],
                "offset": [float(v) for v in topology.rest_offsets[i]],
            }
        )
    Path(path).write_text(json.dumps({"bones": bones}, indent=2))


def load_skeleton(path) -> SkeletonTopology:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "bones" not in doc or not isinstance(doc["bones"], list):
        raise SchemaError(f"{path}: expected an object with a 'bones' list")
    names, parents, offsets = [], [], []
    index = {}
    for b in doc["bones"]:
        try:
            name, parent, offset = b["name"], b["parent"], b["offset"]
        except (TypeError, KeyError) as e:
            raise SchemaError(f"{path}: each bone needs name/parent/offset") from e
        if parent is not None and parent not in index:
            raise SchemaError(f"{path}: parent {parent!r} of {name!r} not defined before use")
        if not (isinstance(offset, list) and len(offset) == 3):
            raise SchemaError(f"{path}: offset of {name!r} must be a 3-list")
        index[name] = len(names)
        names.append(name)
        parents.append(-1 if parent is None else index[parent])
        offsets.append([float(v) for v in offset])
    return SkeletonTopology(tuple(names), np.array(parents), np.array(offsets))


def save_poses(path, poses: np.ndarray) -> None:
    poses = np.asarray(poses, dtype=np.float64)
    Path(path).write_text(json.dumps({"poses": poses.tolist()}))


def load_poses(path) -> np.ndarray:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "poses" not in doc:
        raise SchemaError(f"{path}: expected an object with a 'poses' list")
    poses = np.asarray(doc["poses"], dtype=np.float64)
    if poses.ndim == 2:
        poses = poses[None]
    if poses.ndim != 3 or poses.shape[-1] != 6:
        raise SchemaError(f"{path}: poses must be (frames, bones, 6), got {poses.shape}")
    return poses
