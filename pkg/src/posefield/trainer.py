"""Loss assembly, Adam with step decay, ray-batch training, evaluation.

Per iteration one training frame is drawn, a ray batch is sampled from it
(80% of rays from mask-interior pixels by default), rendered, and scored:

    L = L_rec + lambda_s * L_s
    L_rec = (1/R) sum_rays ||C_hat - C_gt||_1        (sum over channels)
    L_s   = sum_i s_i^x s_i^y s_i^z                  (volume penalty)

The per-ray normalization keeps lambda_s meaningful at any batch size.
Batch sampling is keyed by (seed, iteration) so any step can be replayed
exactly; serial runs with equal seeds are bit-identical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .model import MODES, AvatarModel, ModelConfig, apply_ablation
from .renderer import generate_rays, near_far, render_image, render_rays
from .skeleton import PartScales
from .tensor import Tensor, zero_grads


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_s: float = 0.001
    learning_rate: float = 5e-4
    decay_factor: float = 0.1
    decay_every: int = 20000  # the upstream 500k schedule scaled to desk runs
    rays_per_batch: int = 256
    samples_per_ray: int = 64
    iterations: int = 20000
    seed: int = 0
    mode: str = "full"
    foreground_fraction: float = 0.8
    jitter: bool = False
    checkpoint_every: int = 5000
    log_every: int = 25
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("learning_rate", "rays_per_batch", "samples_per_ray", "iterations"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def learning_rate_at(self, iteration: int) -> float:
        return self.learning_rate * self.decay_factor ** (iteration // self.decay_every)


# -- losses ---------------------------------------------------------------------


def reconstruction_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean-per-ray L1 over rays and channels."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return (pred - gt).abs().sum() * (1.0 / pred.shape[0])


def scale_loss(scales: PartScales) -> Tensor:
    """Sum over bones of the per-bone scale product s_x s_y s_z."""
    s = scales.scales()
    return (s[:, 0] * s[:, 1] * s[:, 2]).sum()


def total_loss(rec: Tensor, scale: Tensor, lambda_s: float) -> Tensor:
    return rec + lambda_s * scale


# -- optimizer --------------------------------------------------------------------


class Adam:
    """Adam with bias correction; beta2 = 0.99 per the training recipe."""

    def __init__(self, params: dict, lr=5e-4, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = 0.0
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g if isinstance(g, np.ndarray) else 0.0)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- batch sampling ----------------------------------------------------------------


def batch_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(iteration,)))


def sample_ray_batch(dataset, config: TrainConfig, iteration: int):
    """Pick one train frame and a foreground-biased pixel batch from it."""
    rng = batch_rng(config.seed, iteration)
    frames = dataset.split("train")
    frame = frames[rng.integers(len(frames))]
    h, w = frame.image.shape[:2]
    n_fg = int(round(config.foreground_fraction * config.rays_per_batch))
    fg = np.flatnonzero(frame.mask.reshape(-1))
    if fg.size == 0:
        n_fg = 0
    picks = []
    if n_fg:
        picks.append(rng.choice(fg, size=n_fg, replace=True))
    if config.rays_per_batch - n_fg:
        picks.append(rng.integers(0, h * w, size=config.rays_per_batch - n_fg))
    flat = np.concatenate(picks)
    rows, cols = flat // w, flat % w
    pixels = np.stack([cols, rows], axis=-1)
    gt = frame.image[rows, cols]
    return frame, pixels, gt, rng


def compute_batch_loss(model: AvatarModel, dataset, config: TrainConfig, iteration: int):
    """Render one training batch and assemble the full loss."""
    frame, pixels, gt, rng = sample_ray_batch(dataset, config, iteration)
    scene = dataset.scene
    origins, dirs = generate_rays(frame.camera, pixels)
    near, far = near_far(frame.camera, scene.bound_center, scene.bound_radius)
    ctx = model.pose_context(frame.pose)
    pred, _ = render_rays(
        lambda p, d: model.field(p, d, None, context=ctx),
        origins,
        dirs,
        near,
        far,
        config.samples_per_ray,
        np.asarray(scene.background),
        jitter=config.jitter,
        rng=rng,
    )
    rec = reconstruction_loss(pred, gt)
    reg = scale_loss(model.scales)
    return total_loss(rec, reg, config.lambda_s), rec, reg, pixels


def train(dataset, config: TrainConfig, out_dir, quiet=False) -> AvatarModel:
    """Run the training loop; writes checkpoints, a loss log and a config sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_config = apply_ablation(config.model, config.mode)
    model_config.seed = config.seed
    model = AvatarModel(model_config, dataset.topology)
    opt = Adam(model.trainable_params(), lr=config.learning_rate)

    sidecar = {
        "train_config": config.to_dict(),
        "model_config": model_config.to_dict(),
        "scene": dataset.scene.to_dict(),
    }
    (out / "run_config.json").write_text(json.dumps(sidecar, indent=2))
    save_checkpoint(out / "checkpoint_000000.pft", model.state_dict())

    log_path = out / "loss_log.csv"
    with log_path.open("w", newline="") as fh:
        log = csv.writer(fh)
        log.writerow(["iteration", "L_rec", "L_s", "total", "lr"])
        for it in range(config.iterations):
            loss, rec, reg, pixels = compute_batch_loss(model, dataset, config, it)
            if not np.isfinite(loss.data):
                norms = {k: float(np.linalg.norm(t.data)) for k, t in model.trainable_params().items()}
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {it}; ray pixels {pixels[:8].tolist()}...; "
                    f"parameter norms {json.dumps(norms)}"
                )
            if it % config.log_every == 0 or it == config.iterations - 1:
                log.writerow([it, repr(rec.item()), repr(reg.item()), repr(loss.item()), repr(config.learning_rate_at(it))])
            loss.backward()
            opt.lr = config.learning_rate_at(it)
            opt.step()
            zero_grads(model.params)
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{it + 1:06d}.pft", model.state_dict())
            if not quiet and it % 500 == 0:
                print(f"iter {it:6d}  loss {loss.item():.5f}", flush=True)
    save_checkpoint(out / "checkpoint_final.pft", model.state_dict())
    return model


# -- evaluation --------------------------------------------------------------------


def render_frame(model: AvatarModel, frame, scene, n_samples=None, chunk=2048):
    ctx = model.pose_context(frame.pose)
    return render_image(
        lambda p, d: model.field(p, d, None, context=ctx),
        frame.camera,
        scene.bound_center,
        scene.bound_radius,
        n_samples or scene.samples_per_ray,
        np.asarray(scene.background),
        chunk=chunk,
    )


def evaluate_frames(render_fn, frames, out_dir=None):
    """Score rendered frames against ground truth; returns metric rows.

    `render_fn(frame) -> (image, alpha)`. PSNR is full-image; F-Dist runs over
    the ground-truth foreground mask.
    """
    from . import metrics

    rows = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for frame in frames:
        img, _ = render_fn(frame)
        rows.append(
            {
                "frame": frame.id,
                "split": frame.split,
                "psnr": metrics.psnr(img, frame.image),
                "ssim": metrics.ssim(img, frame.image),
                "f_dist": metrics.image_f_dist(img, frame.image, frame.mask),
            }
        )
        if out_dir is not None:
            from PIL import Image

            arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(out_dir / f"render_{frame.id:04d}.png")
            fmap = metrics.frequency_map(img) - metrics.frequency_map(frame.image)
            err = metrics.diverging_colormap(fmap, scale=0.15)
            Image.fromarray(np.round(err * 255.0).astype(np.uint8)).save(out_dir / f"freq_err_{frame.id:04d}.png")
    return rows


def write_metric_csv(path, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "split", "psnr", "ssim", "f_dist"])
        for r in rows:
            w.writerow([r["frame"], r["split"], f"{r['psnr']:.4f}", f"{r['ssim']:.6f}", f"{r['f_dist']:.6f}"])
