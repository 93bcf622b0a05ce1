"""Vectorized sin/cos kernels.

Sine is the backbone activation, so these two transcendentals dominate the
training hot path. NumPy's float64 sin/cos are scalar libm calls; torch ships
SIMD (SLEEF) kernels that are roughly 10x faster on the same arrays. When
torch is importable we route through it, otherwise we fall back to numpy.
Set POSEFIELD_NO_TORCH=1 to force the numpy path.

Results differ from numpy by at most 1 ulp; every caller in this package uses
these wrappers, so forward passes stay self-consistent and deterministic.
"""

import os

import numpy as np

_torch = None
if not os.environ.get("POSEFIELD_NO_TORCH"):
    try:
        import torch as _torch

        _torch.set_num_threads(1)
    except ImportError:
        _torch = None


def _apply(torch_fn, np_fn, x):
    if _torch is None or x.dtype != np.float64:
        return np_fn(x)
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    torch_fn(_torch.from_numpy(x), out=_torch.from_numpy(out))
    return out


def sin(x):
    return _apply(_torch.sin if _torch else None, np.sin, np.asarray(x))


def cos(x):
    return _apply(_torch.cos if _torch else None, np.cos, np.asarray(x))
