"""Pinhole camera, ray generation, stratified sampling, alpha compositing.

The compositing integral follows the standard emission-absorption model:

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = exp(-sum_{j<i} sigma_j delta_j)
    C       = sum_i T_i alpha_i c_i + (1 - sum_i T_i alpha_i) * background

One sampling pass, no hierarchical refinement: scenes here are desk-scale.
Near/far planes come from the scene bounding sphere per camera.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .skeleton import SchemaError
from .tensor import Tensor, exclusive_cumsum, no_grad


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray  # (4, 4) rigid

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise SchemaError("focal lengths must be positive")
        if self.cam_to_world.shape != (4, 4):
            raise SchemaError("cam_to_world must be 4x4")
        r = self.cam_to_world[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8):
            raise SchemaError("camera rotation must be orthonormal")

    @property
    def position(self):
        return self.cam_to_world[:3, 3]

    def to_dict(self):
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "cam_to_world": self.cam_to_world.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["width"], d["height"], d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["cam_to_world"]))
        except (TypeError, KeyError) as e:
            raise SchemaError(f"camera record missing field: {e}") from e


def look_at_camera(position, target, width=64, height=64, focal=80.0, up=(0.0, 1.0, 0.0)):
    """Camera at `position` looking at `target` (OpenCV axes: x right, y down, z forward)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, forward, position
    return Camera(width, height, focal, focal, width / 2.0, height / 2.0, m)


def generate_rays(camera: Camera, pixels: np.ndarray):
    """Back-project pixel centers; returns (origins (N,3), dirs (N,3) unit).

    `pixels` holds integer (col, row) pairs inside the image bounds.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ValueError("pixels must be (N, 2)")
    if (
        (pixels[:, 0] < 0).any()
        or (pixels[:, 0] >= camera.width).any()
        or (pixels[:, 1] < 0).any()
        or (pixels[:, 1] >= camera.height).any()
    ):
        raise ValueError("pixel outside image bounds")
    x = (pixels[:, 0] + 0.5 - camera.cx) / camera.fx
    y = (pixels[:, 1] + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d_world = d_cam @ camera.cam_to_world[:3, :3].T
    d_world = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position, d_world.shape).copy()
    return origins, d_world


def all_pixels(camera: Camera) -> np.ndarray:
    cols, rows = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    return np.stack([cols.reshape(-1), rows.reshape(-1)], axis=-1)


def near_far(camera: Camera, center, radius):
    """Near/far from the scene bounding sphere, shared by all rays of a camera."""
    d = float(np.linalg.norm(camera.position - np.asarray(center, dtype=np.float64)))
    near = max(d - radius, 1e-3)
    return near, d + radius


def stratified_sample(near, far, n_rays, n_samples, jitter=False, rng=None):
    """One depth sample per uniform bin over [near, far].

    Bin centers when jitter is off; uniform within each bin when on. Returns
    (t (R, S), delta (R, S)); the terminal delta is the bin width.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    width = (far - near) / n_samples
    edges = near + width * np.arange(n_samples)
    if jitter:
        if rng is None:
            raise ValueError("jitter requires an rng")
        t = edges + width * rng.uniform(0.0, 1.0, size=(n_rays, n_samples))
    else:
        t = np.broadcast_to(edges + 0.5 * width, (n_rays, n_samples)).copy()
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = width
    return t, delta


def composite(sigma: Tensor, color: Tensor, delta: np.ndarray, background: np.ndarray):
    """Blend samples along rays; returns (C (R, 3), alpha (R,)) as Tensors.

    sigma (R, S) must be non-negative, delta (R, S) positive, color (R, S, 3).
    """
    if np.any(sigma.data < 0):
        raise ValueError("negative density")
    if np.any(delta <= 0):
        raise ValueError("non-positive sample spacing")
    tau = sigma * delta
    alpha = 1.0 - (-tau).exp()
    trans = (-exclusive_cumsum(tau, axis=-1)).exp()
    weights = trans * alpha  # (R, S)
    acc = weights.sum(axis=-1)  # (R,)
    # per-channel reduction with the same summation pattern as `acc`, so that
    # unit emitters over black reproduce alpha bit-exactly
    channels = [(weights * color[:, :, k]).sum(axis=-1) for k in range(3)]
    rgb = Tensor.stack(channels, axis=-1)
    bg = np.asarray(background, dtype=np.float64)
    rgb = rgb + (1.0 - acc).reshape(-1, 1) * bg
    return rgb, acc


def render_rays(field, origins, dirs, near, far, n_samples, background, jitter=False, rng=None):
    """Sample, query `field(points, dirs)`, composite. Differentiable end to end.

    `field` maps ((R*S, 3) points, (R*S, 3) dirs) to (sigma (R*S, 1), color
    (R*S, 3)) Tensors.
    """
    n_rays = origins.shape[0]
    t, delta = stratified_sample(near, far, n_rays, n_samples, jitter, rng)
    points = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    flat_pts = points.reshape(-1, 3)
    flat_dirs = np.repeat(dirs, n_samples, axis=0)
    sigma, color = field(flat_pts, flat_dirs)
    sigma = sigma.reshape(n_rays, n_samples)
    color = color.reshape(n_rays, n_samples, 3)
    return composite(sigma, color, delta, background)


def render_image(field, camera: Camera, center, radius, n_samples, background, chunk=2048, jitter=False, rng=None):
    """Render a full frame without building gradient graphs.

    Returns (image (H, W, 3), alpha (H, W)) float64 arrays.
    """
    pixels = all_pixels(camera)
    near, far = near_far(camera, center, radius)
    img = np.zeros((pixels.shape[0], 3))
    acc = np.zeros(pixels.shape[0])
    with no_grad():
        for lo in range(0, pixels.shape[0], chunk):
            sel = pixels[lo : lo + chunk]
            origins, dirs = generate_rays(camera, sel)
            rgb, a = render_rays(field, origins, dirs, near, far, n_samples, background, jitter, rng)
            img[lo : lo + chunk] = rgb.data
            acc[lo : lo + chunk] = a.data
    h, w = camera.height, camera.width
    return img.reshape(h, w, 3), acc.reshape(h, w)


# -- camera file format -----------------------------------------------------------


def save_cameras(path, cameras) -> None:
    Path(path).write_text(json.dumps({"cameras": [c.to_dict() for c in cameras]}, indent=2))


def load_cameras(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "cameras" not in doc:
        raise SchemaError(f"{path}: expected an object with a 'cameras' list")
    return [Camera.from_dict(d) for d in doc["cameras"]]
