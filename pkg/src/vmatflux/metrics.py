"""Fluence-stack similarity metrics.

Both metrics treat the target stack as the reference signal: PSNR's peak
and SSIM's data range come from the target maximum, so a prediction is
always scored against the scale of what it was supposed to produce.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .grids import PlaneStack

SSIM_WINDOW = 7
_K1 = 0.01
_K2 = 0.03


def _as_pair(pred: PlaneStack, target: PlaneStack) -> tuple[np.ndarray, np.ndarray]:
    p = pred.planes.astype(np.float64)
    t = target.planes.astype(np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"stack shapes differ: {p.shape} vs {t.shape}")
    return p, t


def psnr_arrays(pred: np.ndarray, target: np.ndarray) -> float:
    """PSNR of raw arrays; the peak is the target maximum."""
    peak = float(target.max())
    if peak <= 0.0:
        raise ValueError("target stack is all zero; peak is undefined")
    mse = float(np.mean((np.asarray(pred, np.float64)
                         - np.asarray(target, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def psnr(pred: PlaneStack, target: PlaneStack) -> float:
    """10*log10(peak^2 / MSE), peak = target stack max; inf when MSE is 0."""
    p, t = _as_pair(pred, target)
    return psnr_arrays(p, t)


def ssim(pred: PlaneStack, target: PlaneStack) -> float:
    """Mean over control-point slices of windowed 2D SSIM.

    7x7 uniform windows with population moments, K1=0.01, K2=0.03, and
    data range fixed to the target stack maximum. Border pixels whose
    window hangs off the slice are dropped before averaging.
    """
    p, t = _as_pair(pred, target)
    data_range = float(t.max())
    if data_range <= 0.0:
        raise ValueError("target stack is all zero; data range is undefined")
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    per_slice = [_ssim_slice(p[i], t[i], c1, c2) for i in range(p.shape[0])]
    return float(np.mean(per_slice))


def _ssim_slice(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> float:
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(f"slice {x.shape} is smaller than the "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} window")

    def win_mean(a: np.ndarray) -> np.ndarray:
        return ndimage.uniform_filter(a, size=SSIM_WINDOW)

    mx, my = win_mean(x), win_mean(y)
    vx = win_mean(x * x) - mx * mx
    vy = win_mean(y * y) - my * my
    cov = win_mean(x * y) - mx * my
    score = ((2 * mx * my + c1) * (2 * cov + c2)
             / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    r = SSIM_WINDOW // 2
    return float(score[r:-r, r:-r].mean())
