"""Graph neural network over the skeleton: pose -> per-bone feature vectors.

Two graph convolution layers followed by per-node 2-layer MLPs; each node has
its own MLP weights (no sharing across bones). All layers are sine-activated.
The convolution is

    h_i' = sin(W_self h_i + W_nbr * mean_{j in N(i)} h_j + b)

so a perturbation at one joint reaches exactly the 2-hop neighborhood.

Weights are stored (fan_in, fan_out); forward passes are `x @ W + b`.
"""

from __future__ import annotations

import numpy as np

from .skeleton import SkeletonTopology
from .tensor import Tensor, linear


def sine_init(rng, fan_in, fan_out, first=False, omega0=30.0):
    """Standard sine-network weight init (frequency factor absorbed for layer 0)."""
    bound = omega0 / fan_in if first else np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def neighbor_mean_matrix(topology: SkeletonTopology) -> np.ndarray:
    """Row-normalized undirected adjacency (no self loops; self has its own weights)."""
    n = topology.bone_count
    m = np.zeros((n, n))
    for i, nbrs in enumerate(topology.neighbors()):
        for j in nbrs:
            m[i, j] = 1.0 / len(nbrs)
    return m


class PoseEncoder:
    def __init__(self, topology: SkeletonTopology, feature_dim=32, hidden=32, rng=None):
        rng = rng or np.random.default_rng(0)
        self.topology = topology
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.adjacency = Tensor(neighbor_mean_matrix(topology))
        n = topology.bone_count
        p = {}
        p["conv1_self"] = sine_init(rng, 6, hidden)
        p["conv1_nbr"] = sine_init(rng, 6, hidden)
        p["conv1_bias"] = np.zeros(hidden)
        p["conv2_self"] = sine_init(rng, hidden, hidden)
        p["conv2_nbr"] = sine_init(rng, hidden, hidden)
        p["conv2_bias"] = np.zeros(hidden)
        for i in range(n):
            p[f"node{i}_w1"] = sine_init(rng, hidden, hidden)
            p[f"node{i}_b1"] = np.zeros(hidden)
            p[f"node{i}_w2"] = sine_init(rng, hidden, feature_dim)
            p[f"node{i}_b2"] = np.zeros(feature_dim)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def _conv(self, h: Tensor, w_self: Tensor, w_nbr: Tensor, bias: Tensor) -> Tensor:
        return (linear(h, w_self, bias) + linear(self.adjacency @ h, w_nbr)).sin()

    def encode(self, pose) -> Tensor:
        """Pose (N, 6) -> bone features (N, feature_dim)."""
        p = self.params
        h = Tensor._coerce(pose)
        h = self._conv(h, p["conv1_self"], p["conv1_nbr"], p["conv1_bias"])
        h = self._conv(h, p["conv2_self"], p["conv2_nbr"], p["conv2_bias"])
        rows = []
        for i in range(self.topology.bone_count):
            hi = h[i : i + 1]  # (1, hidden)
            hi = linear(hi, p[f"node{i}_w1"], p[f"node{i}_b1"]).sin()
            hi = linear(hi, p[f"node{i}_w2"], p[f"node{i}_b2"]).sin()
            rows.append(hi)
        return Tensor.concat(rows, axis=0)
