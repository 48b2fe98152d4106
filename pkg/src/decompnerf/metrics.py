"""Image quality metrics: PSNR and SSIM.

SSIM follows Wang et al.: 11x11 Gaussian window (sigma 1.5), K1=0.01,
K2=0.03, population (not sample) covariance, nearest-edge padding, and the
mean taken over the interior where the window fits. Color images are scored
per channel and averaged.
"""

from __future__ import annotations

import numpy as np


def psnr(a, b, data_range=1.0):
    """Peak signal-to-noise ratio in dB; identical images return inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(data_range**2 / mse))


def _gaussian_kernel(sigma=1.5, truncate=3.5):
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum(), radius


def _filter2d(img, kernel, radius):
    # separable correlation with edge replication (ndimage 'nearest' mode)
    out = np.pad(img, radius, mode="edge")
    view = np.lib.stride_tricks.sliding_window_view(out, kernel.size, axis=0)
    out = view @ kernel
    view = np.lib.stride_tricks.sliding_window_view(out, kernel.size, axis=1)
    return view @ kernel


def _ssim_single(a, b, data_range, k1, k2, sigma):
    kernel, radius = _gaussian_kernel(sigma=sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ua = _filter2d(a, kernel, radius)
    ub = _filter2d(b, kernel, radius)
    uaa = _filter2d(a * a, kernel, radius)
    ubb = _filter2d(b * b, kernel, radius)
    uab = _filter2d(a * b, kernel, radius)
    va = uaa - ua * ua
    vb = ubb - ub * ub
    vab = uab - ua * ub
    s = ((2 * ua * ub + c1) * (2 * vab + c2)) / ((ua**2 + ub**2 + c1) * (va + vb + c2))
    return float(s[radius:-radius, radius:-radius].mean())


def ssim(a, b, data_range=1.0, k1=0.01, k2=0.03, sigma=1.5):
    """Mean structural similarity. Inputs (H, W) or (H, W, C) in [0, data_range]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < 11:
        raise ValueError("ssim: images must be at least 11 pixels on each side")
    if a.ndim == 2:
        return _ssim_single(a, b, data_range, k1, k2, sigma)
    if a.ndim != 3:
        raise ValueError(f"ssim: expected 2D or 3D input, got shape {a.shape}")
    vals = [_ssim_single(a[:, :, c], b[:, :, c], data_range, k1, k2, sigma) for c in range(a.shape[2])]
    return float(np.mean(vals))
