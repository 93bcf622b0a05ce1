"""Two-stage window function and frequency-coefficient prediction.

Per query point and per part i this computes:

  * spatial window   w_p[i] = exp(-alpha * ||xbar_i||^beta), 0 for invalid parts
  * point features   xdot_i = sin(W_c xbar_i),  f_p[i] = sin(FC(xdot_i, G_i)),
                     f_w[i] = f_p[i] * w_p[i]
  * feature window   w_f = sigmoid(FC(sin(FC(maxpool_i f_w[i]))))
  * combined weight  w[i] = w_p[i] * w_f[i]   (mode-dependent, see below)
  * aggregation      f_m = sum_i w[i] G_i
  * frequencies      theta_1..theta_n = MLP(f_m), one vector per backbone layer
  * reweighting      xtilde_i = xbar_i * w[i]

W_c is a Gaussian-initialized encoding layer (bandwidth = std of the draw),
frozen by default. The frequency MLP's last layer starts at weight~0 / bias 1
so theta == 1 + noise at step 0 and the backbone begins unmodulated.

Modes: "full" (w_p*w_f), "only_spatial" (w_p), "only_feature" (w_f),
"no_window" (1 on valid parts). Invalid parts get weight exactly 0 in every
mode.

Part-leading layout throughout: per-part arrays are (N, P, ...) for N parts
and P points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pose_encoder import sine_init
from .tensor import Tensor, linear

WINDOW_MODES = ("full", "only_spatial", "only_feature", "no_window")


@dataclass
class WindowConfig:
    alpha: float = 2.0
    beta: float = 6.0
    mode: str = "full"

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.mode not in WINDOW_MODES:
            raise ValueError(f"unknown window mode {self.mode!r}")


def spatial_window(xbar: Tensor, valid: np.ndarray, alpha=2.0, beta=6.0) -> Tensor:
    """w_p = exp(-alpha * ||xbar||_2^beta) per part, zeroed on invalid parts.

    Uses ||x||^beta = (x.x)^(beta/2) so the gradient is clean at the part
    center (beta >= 2).
    """
    q = (xbar * xbar).sum(axis=-1)  # (N, P)
    wp = (q.pow(beta / 2.0) * (-alpha)).exp()
    return wp * valid.astype(np.float64)


class WindowStage:
    """Parameters and forward ops for the window + frequency prediction."""

    def __init__(
        self,
        n_parts: int,
        feature_dim=32,  # GNN feature width D_g
        coord_features=32,  # width of sin(W_c x)
        part_feature_dim=32,  # width of f_p
        gate_hidden=32,
        freq_hidden=64,
        n_layers=4,
        layer_width=64,
        bandwidth=10.0,
        coord_trainable=False,
        theta_per_channel=True,
        config: WindowConfig | None = None,
        rng=None,
    ):
        rng = rng or np.random.default_rng(0)
        self.n_parts = n_parts
        self.config = config or WindowConfig()
        self.n_layers = n_layers
        self.layer_width = layer_width
        self.theta_per_channel = theta_per_channel
        theta_out = n_layers * layer_width if theta_per_channel else n_layers
        p = {}
        p["coord_w"] = rng.normal(0.0, bandwidth, size=(3, coord_features))
        p["part_w"] = sine_init(rng, coord_features + feature_dim, part_feature_dim)
        p["part_b"] = np.zeros(part_feature_dim)
        p["gate_w1"] = sine_init(rng, part_feature_dim, gate_hidden)
        p["gate_b1"] = np.zeros(gate_hidden)
        p["gate_w2"] = sine_init(rng, gate_hidden, n_parts)
        p["gate_b2"] = np.zeros(n_parts)
        p["freq_w1"] = sine_init(rng, feature_dim, freq_hidden)
        p["freq_b1"] = np.zeros(freq_hidden)
        p["freq_w2"] = rng.uniform(-0.01, 0.01, size=(freq_hidden, theta_out))
        p["freq_b2"] = np.ones(theta_out)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
        self.params["coord_w"].requires_grad = coord_trainable

    def spatial_window(self, xbar: Tensor, valid: np.ndarray) -> Tensor:
        return spatial_window(xbar, valid, self.config.alpha, self.config.beta)

    def part_point_features(self, xbar: Tensor, bone_features: Tensor, wp: Tensor):
        """Returns (xdot, f_p, f_w) with shapes (N, P, C), (N, P, F), (N, P, F).

        f_p = sin(FC([xdot, G])) is computed as the split product
        xdot @ W[:C] + G @ W[C:], which avoids materializing the per-point
        copy of the bone features.
        """
        p = self.params
        n, pts = xbar.shape[0], xbar.shape[1]
        c = p["coord_w"].shape[1]
        xdot = (xbar @ p["coord_w"]).sin()
        per_part = linear(bone_features, p["part_w"][c:], p["part_b"])  # (N, F)
        fp = (linear(xdot, p["part_w"][:c]) + per_part.reshape(n, 1, -1)).sin()
        fw = fp * wp.reshape(n, pts, 1)
        return xdot, fp, fw

    def feature_window(self, fw: Tensor) -> Tensor:
        """Max-pool over parts, two FC layers, sigmoid; returns w_f as (N, P)."""
        p = self.params
        pooled = fw.max(axis=0)  # (P, F)
        h = linear(pooled, p["gate_w1"], p["gate_b1"]).sin()
        wf = linear(h, p["gate_w2"], p["gate_b2"]).sigmoid()  # (P, N)
        return wf.transpose((1, 0))

    def combine(self, wp: Tensor, wf: Tensor, valid: np.ndarray) -> Tensor:
        """Final per-part weight under the configured mode; invalid parts -> 0."""
        mode = self.config.mode
        mask = valid.astype(np.float64)
        if mode == "full":
            return wp * wf
        if mode == "only_spatial":
            return wp
        if mode == "only_feature":
            return wf * mask
        return Tensor(mask)  # no_window: culling still applies

    def aggregate(self, w: Tensor, bone_features: Tensor) -> Tensor:
        """f_m = sum_i w_i G_i, shape (P, D_g)."""
        return w.transpose((1, 0)) @ bone_features

    def predict_frequencies(self, f_m: Tensor):
        """theta_1..theta_n from f_m; each (P, layer_width)."""
        p = self.params
        h = linear(f_m, p["freq_w1"], p["freq_b1"]).sin()
        theta = linear(h, p["freq_w2"], p["freq_b2"])
        pts = theta.shape[0]
        out = []
        for i in range(self.n_layers):
            if self.theta_per_channel:
                out.append(theta[:, i * self.layer_width : (i + 1) * self.layer_width])
            else:
                out.append(theta[:, i : i + 1].broadcast_to((pts, self.layer_width)))
        return out

    def aggregate_and_predict(self, w: Tensor, bone_features: Tensor):
        f_m = self.aggregate(w, bone_features)
        return f_m, self.predict_frequencies(f_m)


def reweight_positions(xbar: Tensor, w: Tensor) -> Tensor:
    """xtilde_i = xbar_i * w_i; rows of invalid parts are exactly zero."""
    n, pts = xbar.shape[0], xbar.shape[1]
    return xbar * w.reshape(n, pts, 1)
