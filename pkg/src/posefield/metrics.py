"""Image quality and frequency metrics: PSNR, SSIM, patch-STD maps, F-Dist.

All computation is float64 and pure. The frequency map is the per-pixel
population standard deviation of the 5x5 luminance neighborhood (clamped
padding at borders); F-Dist is the L1 distance between normalized histograms
of two frequency maps over fixed bins.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter

PSNR_CAP = 99.99  # sentinel for identical images
LUMA = np.array([0.2126, 0.7152, 0.0722])

FDIST_BINS = 32
FDIST_RANGE = (0.0, 0.3)


def to_luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image @ LUMA


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0, mask: np.ndarray | None = None) -> float:
    """10 log10(peak^2 / MSE), capped at 99.99 dB for identical inputs.

    With a boolean mask the MSE runs over masked pixels only (all channels).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = (a - b) ** 2
    if mask is not None:
        if mask.shape != a.shape[: mask.ndim]:
            raise ValueError("mask shape mismatch")
        d = d[mask]
    mse = d.mean()
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(peak**2 / mse), PSNR_CAP)


def _gaussian_kernel(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    k = k / k.sum()
    return np.outer(k, k)


def _filter2_valid(img, kernel):
    """Correlate with the kernel, keeping only pixels where it fully fits."""
    from scipy.signal import convolve2d

    return convolve2d(img, kernel[::-1, ::-1], mode="valid")


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), mean over valid pixels.

    Inputs are converted to luminance; C1 = (0.01 peak)^2, C2 = (0.03 peak)^2.
    """
    x = to_luminance(a)
    y = to_luminance(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < 11:
        raise ValueError("image smaller than the 11x11 SSIM window")
    k = _gaussian_kernel()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_x = _filter2_valid(x, k)
    mu_y = _filter2_valid(y, k)
    xx = _filter2_valid(x * x, k) - mu_x**2
    yy = _filter2_valid(y * y, k) - mu_y**2
    xy = _filter2_valid(x * y, k) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float((num / den).mean())


def frequency_map(image: np.ndarray) -> np.ndarray:
    """Per-pixel population STD of the 5x5 luminance patch (clamped padding)."""
    lum = to_luminance(image)
    mean = uniform_filter(lum, size=5, mode="nearest")
    mean_sq = uniform_filter(lum * lum, size=5, mode="nearest")
    var = np.maximum(mean_sq - mean**2, 0.0)
    return np.sqrt(var)


def frequency_histogram(freq_map: np.ndarray, mask: np.ndarray | None = None, bins: int = FDIST_BINS):
    """Normalized histogram of a frequency map; values above range clip into the last bin.

    Returns (mass (bins,), edges (bins+1,)). Mass sums to 1 for nonempty input.
    """
    vals = np.asarray(freq_map, dtype=np.float64)
    if mask is not None:
        vals = vals[mask]
    vals = np.clip(vals.reshape(-1), FDIST_RANGE[0], FDIST_RANGE[1] - 1e-12)
    edges = np.linspace(FDIST_RANGE[0], FDIST_RANGE[1], bins + 1)
    hist, _ = np.histogram(vals, bins=edges)
    total = hist.sum()
    mass = hist / total if total else hist.astype(np.float64)
    return mass, edges


def f_dist(h1: np.ndarray, h2: np.ndarray) -> float:
    """L1 distance between two normalized frequency histograms (max 2)."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape:
        raise ValueError("histogram binning mismatch")
    return float(np.abs(h1 - h2).sum())


def image_f_dist(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """F-Dist between two images: histogram distance of their patch-STD maps."""
    h1, _ = frequency_histogram(frequency_map(a), mask)
    h2, _ = frequency_histogram(frequency_map(b), mask)
    return f_dist(h1, h2)


def diverging_colormap(values: np.ndarray, scale: float) -> np.ndarray:
    """Blue-negative / red-positive map of signed values into RGB in [0, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float64) / scale, -1.0, 1.0)
    rgb = np.ones(v.shape + (3,))
    pos = np.maximum(v, 0.0)
    neg = np.maximum(-v, 0.0)
    rgb[..., 1] -= pos + neg  # fade green everywhere
    rgb[..., 2] -= pos  # red keeps R, drops B
    rgb[..., 0] -= neg  # blue keeps B, drops R
    return np.clip(rgb, 0.0, 1.0)
