"""posefield: pose-modulated neural radiance fields for articulated bodies.

A desk-scale, fully differentiable pipeline: a skeleton GNN encodes pose,
a two-stage window aggregates per-part features per query point, the
aggregate drives per-layer frequency coefficients of a sine backbone, and a
volume renderer composites images. A procedural capsule scene with
pose-dependent texture frequency provides analytic ground truth.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .model import AvatarModel, ModelConfig, apply_ablation
from .synthetic import Dataset, SceneSpec, default_scene, generate_dataset
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, train

__all__ = [
    "AvatarModel",
    "Dataset",
    "ModelConfig",
    "SceneSpec",
    "Tensor",
    "TrainConfig",
    "apply_ablation",
    "default_scene",
    "generate_dataset",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "train",
]

__version__ = "0.1.0"
