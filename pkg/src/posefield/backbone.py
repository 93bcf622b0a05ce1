"""Frequency-modulated sine backbone and the density/color head.

The backbone concatenates all reweighted bone-relative positions, encodes
them with one sine layer, then runs n modulated layers

    f_i = sin(theta_i * (W_i f_{i-1}) + b_i)

where theta_i scales the pre-activation elementwise and the bias stays
outside the modulation. The output S(x) is the concatenation of all layer
activations (multi-scale), handed to the head:

    sigma = softplus(W_s S + b_s)                  -- never sees the direction
    c     = sigmoid(W_c2 relu(W_c1 [S, E(d)]) + b) -- E = sinusoidal embedding

The head is ReLU-based; sine activations are reserved for the encoder,
window and modulation parameters.
"""

from __future__ import annotations

import numpy as np

from . import fastmath
from .pose_encoder import sine_init
from .tensor import Tensor, linear


def direction_embedding(dirs: np.ndarray, n_freqs: int = 4) -> np.ndarray:
    """[d, sin(2^k pi d), cos(2^k pi d)] for k < n_freqs; plain arrays, no grads."""
    dirs = np.asarray(dirs, dtype=np.float64)
    parts = [dirs]
    for k in range(n_freqs):
        ang = (2.0**k) * np.pi * dirs
        parts.append(fastmath.sin(ang))
        parts.append(fastmath.cos(ang))
    return np.concatenate(parts, axis=-1)


class SineBackbone:
    def __init__(self, in_dim, n_layers=4, width=64, omega0=30.0, extra_first_dim=0, rng=None):
        """`extra_first_dim` widens layer 1's input (used by the only-GNN wiring)."""
        rng = rng or np.random.default_rng(0)
        self.n_layers = n_layers
        self.width = width
        p = {}
        p["enc_w"] = sine_init(rng, in_dim, width, first=True, omega0=omega0)
        p["enc_b"] = np.zeros(width)
        for i in range(n_layers):
            fan_in = width + extra_first_dim if i == 0 else width
            p[f"layer{i}_w"] = sine_init(rng, fan_in, width)
            p[f"layer{i}_b"] = np.zeros(width)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def encode(self, x: Tensor) -> Tensor:
        """First sine layer over the concatenated positions."""
        p = self.params
        return linear(x, p["enc_w"], p["enc_b"]).sin()

    def forward(self, f0: Tensor, thetas=None, return_preacts=False):
        """Run the modulated layers; thetas None means unmodulated (theta == 1).

        Returns S = [f_1, ..., f_n] concatenated; with return_preacts also the
        list of modulated pre-activations (before the bias and sine).
        """
        p = self.params
        feats, preacts = [], []
        h = f0
        for i in range(self.n_layers):
            z = linear(h, p[f"layer{i}_w"])
            if thetas is not None:
                z = z * thetas[i]
            preacts.append(z)
            h = (z + p[f"layer{i}_b"]).sin()
            feats.append(h)
        s = Tensor.concat(feats, axis=-1)
        if return_preacts:
            return s, preacts
        return s

    @property
    def out_dim(self):
        return self.n_layers * self.width


class RadianceHead:
    def __init__(self, s_dim, dir_dim, color_hidden=64, density_scale=30.0, density_bias=-2.0, rng=None):
        """`density_scale`/`density_bias` set the gain and offset of the
        density readout: sigma = softplus(scale * (w.S + b) + bias). The gain
        lets optimizer-sized weight steps reach both opaque (sigma in the
        hundreds) and fully transparent regimes quickly; the negative bias
        starts the volume nearly empty instead of half-opaque fog.
        """
        rng = rng or np.random.default_rng(0)
        self.density_scale = density_scale
        self.density_bias = density_bias
        p = {}
        b = np.sqrt(6.0 / s_dim)
        p["sigma_w"] = rng.uniform(-b, b, size=(s_dim, 1)) / density_scale
        p["sigma_b"] = np.zeros(1)
        b = np.sqrt(6.0 / (s_dim + dir_dim))
        p["color_w1"] = rng.uniform(-b, b, size=(s_dim + dir_dim, color_hidden))
        p["color_b1"] = np.zeros(color_hidden)
        b = np.sqrt(6.0 / color_hidden)
        p["color_w2"] = rng.uniform(-b, b, size=(color_hidden, 3))
        p["color_b2"] = np.zeros(3)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def density(self, s: Tensor) -> Tensor:
        p = self.params
        z = linear(s, p["sigma_w"], p["sigma_b"]) * self.density_scale + self.density_bias
        return z.softplus()

    def color(self, s: Tensor, dir_embed: np.ndarray) -> Tensor:
        # FC over [S, E(d)] as a split product; the embedding block is constant
        p = self.params
        k = s.shape[-1]
        h = (linear(s, p["color_w1"][:k]) + linear(Tensor(dir_embed), p["color_w1"][k:], p["color_b1"])).relu()
        return linear(h, p["color_w2"], p["color_b2"]).sigmoid()

    def radiance(self, s: Tensor, dirs: np.ndarray, n_freqs: int = 4):
        """(color, sigma) for unit view directions; density ignores direction."""
        norms = np.linalg.norm(dirs, axis=-1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("view directions must be unit length")
        return self.color(s, direction_embedding(dirs, n_freqs)), self.density(s)
