"""Full avatar field: pose + query points -> (density, color).

Wiring per batch of P points under one pose:

    pose --FK--> bone transforms --to_relative--> xbar (N,P,3), validity
    pose --GNN--> bone features G (N, D_g)
    window: w_p, w_f -> w; f_m = sum w_i G_i; theta_1..n = MLP(f_m)
    xtilde = xbar * w, flattened to (P, 3N)
    backbone: f0 = sin(W0 xtilde); modulated sine layers -> S(x)
    head: sigma = softplus(FC(S)), c = sigmoid(FC(relu(FC(S, E(dir)))))

Points with no valid part are culled: the network never sees them and they
contribute sigma = 0, c = 0 exactly. With culling disabled every point is
evaluated and invalid ones have sigma zeroed, which renders bit-identically.

Modes:
    full          two branches, modulated backbone
    only_gnn      no modulation; backbone layer 1 consumes [f0, f_m]
    only_syn      theta frozen at 1 (plain sine backbone)
    only_spatial  w = w_p only
    only_feature  w = w_f only
    no_window     w = 1 on valid parts
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .backbone import RadianceHead, SineBackbone
from .pose_encoder import PoseEncoder
from .skeleton import PartScales, SkeletonTopology, forward_kinematics, to_relative
from .tensor import Tensor, put, take
from .window import WindowConfig, WindowStage, reweight_positions

MODES = ("full", "only_gnn", "only_syn", "only_spatial", "only_feature", "no_window")

_WINDOW_MODE = {
    "full": "full",
    "only_gnn": "full",
    "only_syn": "full",
    "only_spatial": "only_spatial",
    "only_feature": "only_feature",
    "no_window": "no_window",
}


@dataclass
class ModelConfig:
    feature_dim: int = 32  # GNN output width D_g
    conv_hidden: int = 32
    coord_features: int = 32
    part_feature_dim: int = 32
    gate_hidden: int = 32
    freq_hidden: int = 64
    n_layers: int = 4
    hidden: int = 64
    omega0: float = 30.0
    bandwidth: float = 10.0
    coord_trainable: bool = False
    theta_per_channel: bool = True
    dir_frequencies: int = 4
    color_hidden: int = 64
    density_scale: float = 30.0
    density_bias: float = -2.0
    scale_init: float = 0.5
    alpha: float = 2.0
    beta: float = 6.0
    mode: str = "full"
    cull: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class AvatarModel:
    def __init__(self, config: ModelConfig, topology: SkeletonTopology):
        self.config = config
        self.topology = topology
        n = topology.bone_count
        rng = np.random.default_rng(config.seed)
        enc_rng, win_rng, bb_rng, head_rng = [np.random.default_rng(s) for s in rng.integers(0, 2**63, 4)]

        self.encoder = PoseEncoder(topology, config.feature_dim, config.conv_hidden, enc_rng)
        self.window = WindowStage(
            n_parts=n,
            feature_dim=config.feature_dim,
            coord_features=config.coord_features,
            part_feature_dim=config.part_feature_dim,
            gate_hidden=config.gate_hidden,
            freq_hidden=config.freq_hidden,
            n_layers=config.n_layers,
            layer_width=config.hidden,
            bandwidth=config.bandwidth,
            coord_trainable=config.coord_trainable,
            theta_per_channel=config.theta_per_channel,
            config=WindowConfig(config.alpha, config.beta, _WINDOW_MODE[config.mode]),
            rng=win_rng,
        )
        extra = config.feature_dim if config.mode == "only_gnn" else 0
        self.backbone = SineBackbone(
            3 * n, config.n_layers, config.hidden, config.omega0, extra_first_dim=extra, rng=bb_rng
        )
        self.head = RadianceHead(
            self.backbone.out_dim,
            3 + 6 * config.dir_frequencies,
            config.color_hidden,
            density_scale=config.density_scale,
            density_bias=config.density_bias,
            rng=head_rng,
        )
        self.scales = PartScales(n, config.scale_init)

        self.params = {}
        for prefix, group in (
            ("pose_encoder", self.encoder.params),
            ("window", self.window.params),
            ("backbone", self.backbone.params),
            ("radiance", self.head.params),
        ):
            for k, t in group.items():
                self.params[f"{prefix}/{k}"] = t
        self.params["skeleton/log_scales"] = self.scales.log_s

    # -- parameter plumbing ---------------------------------------------------

    def trainable_params(self):
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, arrays):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()

    # -- forward --------------------------------------------------------------

    def pose_context(self, pose):
        """Per-pose work shared by all points: kinematics + GNN features."""
        pose = Tensor._coerce(pose)
        transforms = forward_kinematics(self.topology, pose)
        g = self.encoder.encode(pose)
        return transforms, g

    def field(self, points: np.ndarray, dirs: np.ndarray, pose, context=None):
        """Density and color at `points` viewed along `dirs` under `pose`.

        Returns (sigma (P, 1), color (P, 3)) as Tensors. Culled points (no
        valid part) are exactly zero in both.
        """
        transforms, g = context if context is not None else self.pose_context(pose)
        points = np.asarray(points, dtype=np.float64)
        total = points.shape[0]
        rel = to_relative(points, transforms, self.scales)

        if self.config.cull:
            if not rel.any_valid.any():
                return Tensor(np.zeros((total, 1))), Tensor(np.zeros((total, 3)))
            if rel.any_valid.all():
                idx = None
                xbar, valid, dirs_v = rel.xbar, rel.valid, dirs
            else:
                idx = np.flatnonzero(rel.any_valid)
                xbar = take(rel.xbar, idx, axis=1)
                valid = rel.valid[:, idx]
                dirs_v = dirs[idx]
        else:
            idx = None
            xbar, valid, dirs_v = rel.xbar, rel.valid, dirs

        color, sigma = self._field_on_valid(xbar, valid, dirs_v, g)

        if not self.config.cull:
            mask = rel.any_valid.astype(np.float64)[:, None]
            sigma = sigma * mask
        elif idx is not None:
            sigma = put(sigma, idx, total, axis=0)
            color = put(color, idx, total, axis=0)
        return sigma, color

    def _field_on_valid(self, xbar, valid, dirs, g):
        cfg = self.config
        win = self.window
        n, pts = xbar.shape[0], xbar.shape[1]

        wp = win.spatial_window(xbar, valid)
        _, _, fwin = win.part_point_features(xbar, g, wp)
        wf = win.feature_window(fwin)
        w = win.combine(wp, wf, valid)

        xtilde = reweight_positions(xbar, w)
        flat = xtilde.transpose((1, 0, 2)).reshape(pts, 3 * n)
        f0 = self.backbone.encode(flat)

        if cfg.mode == "only_gnn":
            f_m = win.aggregate(w, g)
            s = self.backbone.forward(Tensor.concat([f0, f_m], axis=-1), None)
        elif cfg.mode == "only_syn":
            s = self.backbone.forward(f0, None)
        else:
            f_m, thetas = win.aggregate_and_predict(w, g)
            s = self.backbone.forward(f0, thetas)

        return self.head.radiance(s, dirs, cfg.dir_frequencies)


def apply_ablation(config: ModelConfig, mode: str) -> ModelConfig:
    """Return a copy of `config` rewired for an ablation mode."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    d = config.to_dict()
    d["mode"] = mode
    return ModelConfig.from_dict(d)
