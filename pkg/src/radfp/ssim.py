"""Volumetric SSIM (7^3 uniform window) and plain MSE."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter

WINDOW = 7


def _pair(a, b):
    xa = a.data if hasattr(a, "data") else np.asarray(a, dtype=np.float64)
    xb = b.data if hasattr(b, "data") else np.asarray(b, dtype=np.float64)
    xa = xa.astype(np.float64, copy=False)
    xb = xb.astype(np.float64, copy=False)
    if xa.shape != xb.shape:
        raise ValueError(f"shape mismatch: {xa.shape} vs {xb.shape}")
    return xa, xb


def mse(a, b) -> float:
    """Mean squared voxel difference."""
    xa, xb = _pair(a, b)
    return float(np.mean((xa - xb) ** 2))


def ssim3d(a, b, window: int = WINDOW) -> float:
    """Mean SSIM over all fully-valid window positions.

    Uses a uniform cubic window, population moments within the window, and
    stabilizers c1 = (0.01 L)^2, c2 = (0.03 L)^2 with L the dynamic range of
    the first argument (floored to 1 when a is constant).
    """
    xa, xb = _pair(a, b)
    if any(d < window for d in xa.shape):
        raise ValueError(f"dims {xa.shape} too small for {window}^3 SSIM window")
    pad = window // 2
    valid = tuple(slice(pad, d - pad) for d in xa.shape)

    def win_mean(x):
        return uniform_filter(x, size=window, mode="constant")[valid]

    mu_a = win_mean(xa)
    mu_b = win_mean(xb)
    var_a = win_mean(xa * xa) - mu_a**2
    var_b = win_mean(xb * xb) - mu_b**2
    cov = win_mean(xa * xb) - mu_a * mu_b
    rng = float(xa.max() - xa.min())
    if rng <= 0.0:
        rng = 1.0
    c1 = (0.01 * rng) ** 2
    c2 = (0.03 * rng) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
