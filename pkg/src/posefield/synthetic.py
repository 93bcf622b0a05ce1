"""Procedural articulated capsule scenes with pose-dependent texture frequency.

The oracle field is analytic ground truth: density is a smooth occupancy of
the minimum capsule signed distance (support ends at +eps outside the
surface), and color is a striped albedo whose local spatial frequency grows
with the bend angle of the nearest joint:

    f_local = f_base + wrinkle_gain * bend_angle(nearest joint)

so a straight joint shows the base stripe frequency and a bent joint shows
strictly finer stripes. High-contrast decal balls act as fixed markers.
Everything is continuous in both position and pose.

Rendered datasets (images, masks, cameras, poses, manifest) are written with
deterministic bin-center sampling so a re-render reproduces them exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .renderer import Camera, load_cameras, look_at_camera, render_image, save_cameras
from .skeleton import (
    SchemaError,
    SkeletonTopology,
    bend_angles,
    fk_numpy,
    identity_pose,
    load_poses,
    load_skeleton,
    rotation_to_6d,
    save_poses,
    save_skeleton,
)
from .tensor import Tensor


@dataclass
class CapsuleSpec:
    bone: int
    radius: float
    length: float
    axis: tuple  # unit direction in the bone frame
    albedo: tuple  # base RGB in [0, 1]


@dataclass
class DecalSpec:
    bone: int
    center: tuple  # ball center in the bone frame
    radius: float
    color: tuple


@dataclass
class SceneSpec:
    topology: SkeletonTopology
    capsules: list
    decals: list = field(default_factory=list)
    stripe_frequency: float = 1.0  # cycles per scene unit on a straight joint
    wrinkle_gain: float = 1.65  # added cycles/unit per radian of bend
    stripe_contrast: float = 0.5
    occupancy_eps: float = 0.01
    sigma_max: float = 150.0
    background: tuple = (1.0, 1.0, 1.0)
    bound_center: tuple = (0.15, 0.05, 0.0)
    bound_radius: float = 1.2
    # capture protocol
    image_size: int = 64
    focal: float = 92.0
    camera_distance: float = 2.4
    camera_count: int = 10
    held_out_cameras: int = 2
    samples_per_ray: int = 64
    train_frames: int = 30
    novel_view_frames: int = 8
    novel_pose_frames: int = 8

    def to_dict(self):
        bones = []
        for i, name in enumerate(self.topology.names):
            p = self.topology.parents[i]
            bones.append(
                {
                    "name": name,
                    "parent": None if p < 0 else self.topology.names[p],
                    "offset": [float(v) for v in self.topology.rest_offsets[i]],
                }
            )
        d = {
            "bones": bones,
            "capsules": [
                {"bone": c.bone, "radius": c.radius, "length": c.length, "axis": list(c.axis), "albedo": list(c.albedo)}
                for c in self.capsules
            ],
            "decals": [
                {"bone": d_.bone, "center": list(d_.center), "radius": d_.radius, "color": list(d_.color)}
                for d_ in self.decals
            ],
        }
        for k in (
            "stripe_frequency",
            "wrinkle_gain",
            "stripe_contrast",
            "occupancy_eps",
            "sigma_max",
            "background",
            "bound_center",
            "bound_radius",
            "image_size",
            "focal",
            "camera_distance",
            "camera_count",
            "held_out_cameras",
            "samples_per_ray",
            "train_frames",
            "novel_view_frames",
            "novel_pose_frames",
        ):
            v = getattr(self, k)
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            names, parents, offsets, index = [], [], [], {}
            for b in d["bones"]:
                index[b["name"]] = len(names)
                names.append(b["name"])
                parents.append(-1 if b["parent"] is None else index[b["parent"]])
                offsets.append(b["offset"])
            topology = SkeletonTopology(tuple(names), np.array(parents), np.array(offsets, dtype=np.float64))
            capsules = [
                CapsuleSpec(c["bone"], c["radius"], c["length"], tuple(c["axis"]), tuple(c["albedo"]))
                for c in d["capsules"]
            ]
            decals = [
                DecalSpec(x["bone"], tuple(x["center"]), x["radius"], tuple(x["color"])) for x in d.get("decals", [])
            ]
        except (TypeError, KeyError) as e:
            raise SchemaError(f"scene file missing field: {e}") from e
        extra = {
            k: (tuple(v) if isinstance(v, list) else v)
            for k, v in d.items()
            if k not in ("bones", "capsules", "decals")
        }
        return cls(topology, capsules, decals, **extra)


def save_scene(path, scene: SceneSpec) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2))


def load_scene(path) -> SceneSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    return SceneSpec.from_dict(doc)


def default_scene() -> SceneSpec:
    """Five-part body: torso, two arm segments, two leg segments.

    Sized so the subject fills roughly a fifth of the frame, with stripe
    frequencies that stay below patch-STD saturation at a 90-degree bend.
    The lower arm stays decal-free: it is the probe segment for the
    pose-to-frequency phenomenon.
    """
    topology = SkeletonTopology(
        ("torso", "arm_upper", "arm_lower", "leg_upper", "leg_lower"),
        np.array([-1, 0, 1, 0, 3]),
        np.array(
            [
                [0.0, 0.0, 0.0],
                [0.0, 0.55, 0.0],  # shoulder at the torso top
                [0.38, 0.0, 0.0],  # elbow at the upper-arm end
                [0.0, 0.0, 0.0],  # hip at the torso base
                [0.0, -0.42, 0.0],  # knee at the upper-leg end
            ]
        ),
    )
    capsules = [
        CapsuleSpec(0, 0.175, 0.55, (0.0, 1.0, 0.0), (0.80, 0.42, 0.32)),
        CapsuleSpec(1, 0.115, 0.38, (1.0, 0.0, 0.0), (0.34, 0.62, 0.84)),
        CapsuleSpec(2, 0.095, 0.38, (1.0, 0.0, 0.0), (0.88, 0.78, 0.30)),
        CapsuleSpec(3, 0.12, 0.42, (0.0, -1.0, 0.0), (0.45, 0.76, 0.42)),
        CapsuleSpec(4, 0.10, 0.42, (0.0, -1.0, 0.0), (0.80, 0.55, 0.78)),
    ]
    decals = [
        DecalSpec(0, (0.175, 0.30, 0.0), 0.07, (0.05, 0.05, 0.05)),
        DecalSpec(3, (0.12, -0.20, 0.0), 0.05, (0.97, 0.97, 0.97)),
    ]
    return SceneSpec(topology, capsules, decals)


# -- oracle field -------------------------------------------------------------


def _capsule_sdf(points, a, b, radius):
    """Signed distance from `points` (P, 3) to the capsule with axis a->b."""
    ab = b - a
    ap = points - a
    t = np.clip(ap @ ab / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=-1) - radius


def _smoothstep01(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (u * (6.0 * u - 15.0) + 10.0)


class OracleField:
    """Analytic (sigma, color) evaluator for one scene under one pose."""

    def __init__(self, scene: SceneSpec, pose: np.ndarray):
        self.scene = scene
        self.rot, self.trans = fk_numpy(scene.topology, pose)
        self.bends = bend_angles(scene.topology, pose)
        self.seg_a, self.seg_b = [], []
        for c in scene.capsules:
            a = self.trans[c.bone]
            b = a + self.rot[c.bone] @ (np.asarray(c.axis) * c.length)
            self.seg_a.append(a)
            self.seg_b.append(b)

    @staticmethod
    def _softmin_weights(dists: np.ndarray, temperature: float) -> np.ndarray:
        """exp(-d/T) normalized over axis 0; smooth stand-in for nearest-of."""
        w = np.exp(-(dists - dists.min(axis=0)) / temperature)
        return w / w.sum(axis=0)

    def local_frequency(self, points: np.ndarray) -> np.ndarray:
        """Stripe frequency per point: base + gain * softmin-blended joint bend.

        Blending over joint distances (instead of a hard nearest-joint pick)
        keeps the texture continuous in both position and pose; with every
        joint straight the result is exactly the base frequency.
        """
        d_joint = np.stack([np.linalg.norm(points - t, axis=-1) for t in self.trans])
        w = self._softmin_weights(d_joint, 0.08)
        return self.scene.stripe_frequency + self.scene.wrinkle_gain * (w * self.bends[:, None]).sum(axis=0)

    def __call__(self, points: np.ndarray):
        """Returns (sigma (P,), color (P, 3))."""
        scene = self.scene
        points = np.asarray(points, dtype=np.float64)
        sdf = np.stack(
            [_capsule_sdf(points, a, b, c.radius) for a, b, c in zip(self.seg_a, self.seg_b, scene.capsules)]
        )
        d = sdf.min(axis=0)
        eps = scene.occupancy_eps
        sigma = scene.sigma_max * _smoothstep01((eps - d) / (2.0 * eps))

        freq = self.local_frequency(points)
        w_cap = self._softmin_weights(sdf, 0.02)
        color = np.zeros_like(points)
        for i, c in enumerate(scene.capsules):
            local = (points - self.trans[c.bone]) @ self.rot[c.bone]
            u = local @ np.asarray(c.axis, dtype=np.float64)
            stripe = 1.0 - scene.stripe_contrast * 0.5 * (1.0 + np.sin(2.0 * np.pi * freq * u))
            color += w_cap[i, :, None] * np.asarray(c.albedo) * stripe[:, None]
        for dec in scene.decals:
            local = (points - self.trans[dec.bone]) @ self.rot[dec.bone]
            dist = np.linalg.norm(local - np.asarray(dec.center), axis=-1)
            m = _smoothstep01((dec.radius - dist) / 0.02)
            color = color * (1.0 - m[:, None]) + np.asarray(dec.color) * m[:, None]
        return sigma, color


def oracle_field(scene: SceneSpec, pose: np.ndarray, points: np.ndarray):
    """One-shot convenience wrapper around :class:`OracleField`."""
    return OracleField(scene, pose)(points)


def oracle_render(scene: SceneSpec, pose: np.ndarray, camera: Camera, n_samples=None):
    """Render the analytic field through the standard compositor."""
    oracle = OracleField(scene, pose)

    def as_field(points, dirs):
        sigma, color = oracle(points)
        return Tensor(sigma[:, None]), Tensor(color)

    return render_image(
        as_field,
        camera,
        scene.bound_center,
        scene.bound_radius,
        n_samples or scene.samples_per_ray,
        np.asarray(scene.background),
    )


def segment_interior_mask(scene: SceneSpec, pose: np.ndarray, camera: Camera, capsule_index: int) -> np.ndarray:
    """Pixels whose full 5x5 patch lies inside one capsule's silhouette.

    Renders the capsule alone and erodes its coverage mask, so patch
    statistics over the result measure surface texture rather than
    silhouette contrast.
    """
    from dataclasses import replace

    from scipy.ndimage import binary_erosion

    solo = replace(scene, capsules=[scene.capsules[capsule_index]], decals=[])
    _, alpha = oracle_render(solo, pose, camera)
    return binary_erosion(alpha > 0.5, np.ones((5, 5), dtype=bool))


# -- pose sampling --------------------------------------------------------------


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def bent_pose(topology: SkeletonTopology, elbow=0.0, knee=0.0, shoulder=0.0, shoulder_x=0.0, hip=0.0) -> np.ndarray:
    """Pose from named joint angles (radians) for the default 5-bone body."""
    rots = np.broadcast_to(np.eye(3), (topology.bone_count, 3, 3)).copy()
    rots[1] = _rot_z(shoulder) @ _rot_x(shoulder_x)
    rots[2] = _rot_z(elbow)
    rots[3] = _rot_z(hip)
    rots[4] = _rot_z(knee)
    return rotation_to_6d(rots)


def sample_pose(topology: SkeletonTopology, rng) -> np.ndarray:
    """Random training pose: moderate shoulder/hip swings, 0-100 degree bends."""
    return bent_pose(
        topology,
        elbow=rng.uniform(0.0, np.deg2rad(100.0)),
        knee=rng.uniform(0.0, np.deg2rad(100.0)),
        shoulder=rng.uniform(-0.5, 0.5),
        shoulder_x=rng.uniform(-0.4, 0.4),
        hip=rng.uniform(-0.35, 0.35),
    )


def camera_ring(scene: SceneSpec):
    """Evenly spaced cameras looking at the scene center, two elevations."""
    cams = []
    center = np.asarray(scene.bound_center)
    for i in range(scene.camera_count):
        az = 2.0 * np.pi * i / scene.camera_count
        el = np.deg2rad(12.0 if i % 2 == 0 else -8.0)
        pos = center + scene.camera_distance * np.array(
            [np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)]
        )
        cams.append(look_at_camera(pos, center, scene.image_size, scene.image_size, scene.focal))
    return cams


# -- dataset generation and loading -----------------------------------------------


def _save_png(path, arr):
    Image.fromarray(np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)).save(path)


def generate_dataset(scene: SceneSpec, out_dir, seed: int = 0) -> None:
    """Render and write a complete dataset; byte-identical for equal seeds.

    Splits: `train` poses under the first cameras of the ring, `novel_view`
    reuses train poses under the held-out cameras, `novel_pose` holds unseen
    poses (the first two are the exactly-straight and the 90-degree-bent
    poses used by the frequency evaluation).
    """
    out = Path(out_dir)
    for sub in ("images", "masks", "hdr"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    topo = scene.topology

    train_poses = [sample_pose(topo, rng) for _ in range(scene.train_frames)]
    novel_poses = [identity_pose(topo.bone_count), bent_pose(topo, elbow=np.pi / 2, knee=np.pi / 2)]
    while len(novel_poses) < scene.novel_pose_frames:
        novel_poses.append(sample_pose(topo, rng))
    novel_poses = novel_poses[: scene.novel_pose_frames]
    poses = train_poses + novel_poses

    cameras = camera_ring(scene)
    ring = scene.camera_count - scene.held_out_cameras

    frames = []
    for i in range(scene.train_frames):
        frames.append({"pose": i, "camera": i % ring, "split": "train"})
    for i in range(scene.novel_view_frames):
        frames.append({"pose": i % scene.train_frames, "camera": ring + i % scene.held_out_cameras, "split": "novel_view"})
    for i in range(scene.novel_pose_frames):
        frames.append({"pose": scene.train_frames + i, "camera": (2 * i) % ring, "split": "novel_pose"})

    manifest = {"frames": [], "splits": {"train": [], "novel_view": [], "novel_pose": []}}
    for fid, rec in enumerate(frames):
        img, alpha = oracle_render(scene, poses[rec["pose"]], cameras[rec["camera"]])
        mask = alpha > 0.5
        _save_png(out / "images" / f"{fid:04d}.png", img)
        _save_png(out / "masks" / f"{fid:04d}.png", mask.astype(np.float64))
        np.save(out / "hdr" / f"{fid:04d}.npy", img.astype(np.float32))
        entry = {"id": fid, "pose": rec["pose"], "camera": rec["camera"], "split": rec["split"]}
        manifest["frames"].append(entry)
        manifest["splits"][rec["split"]].append(fid)
    manifest["special"] = {
        "straight": manifest["splits"]["novel_pose"][0],
        "bent90": manifest["splits"]["novel_pose"][1],
    }

    save_scene(out / "scene.json", scene)
    save_skeleton(out / "skeleton.json", topo)
    save_poses(out / "poses.json", np.stack(poses))
    save_cameras(out / "cameras.json", cameras)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


@dataclass
class Frame:
    id: int
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray  # (H, W) bool
    camera: Camera
    pose: np.ndarray  # (N, 6)
    split: str


class Dataset:
    def __init__(self, root):
        root = Path(root)
        if not (root / "manifest.json").exists():
            raise FileNotFoundError(f"{root}: no manifest.json")
        self.root = root
        self.scene = load_scene(root / "scene.json")
        self.topology = load_skeleton(root / "skeleton.json")
        self.poses = load_poses(root / "poses.json")
        self.cameras = load_cameras(root / "cameras.json")
        manifest = json.loads((root / "manifest.json").read_text())
        self.splits = manifest["splits"]
        self.special = manifest.get("special", {})
        self.frames = []
        for rec in manifest["frames"]:
            fid = rec["id"]
            hdr = root / "hdr" / f"{fid:04d}.npy"
            if hdr.exists():
                img = np.load(hdr).astype(np.float64)
            else:
                img = np.asarray(Image.open(root / "images" / f"{fid:04d}.png"), dtype=np.float64) / 255.0
            mask = np.asarray(Image.open(root / "masks" / f"{fid:04d}.png")) > 127
            self.frames.append(Frame(fid, img, mask, self.cameras[rec["camera"]], self.poses[rec["pose"]], rec["split"]))

    def split(self, name):
        return [f for f in self.frames if f.split == name]

    def frame(self, fid):
        return self.frames[fid]
