"""Attack efficacy and imperceptibility metrics: ASR, l-inf, l2, PSNR, SSIM.

Distance conventions (applied uniformly to every method so comparisons stay
valid): l-inf is the max absolute byte difference divided by 255; l2 is the
Euclidean norm of the full difference tensor, also in /255 units. PSNR uses
peak 255 with a 100 dB sentinel cap for vanishing MSE. SSIM uses a uniform
8x8 window with stride 1, C1=(0.01*255)^2, C2=(0.03*255)^2, population
moments, channels collapsed by mean before windowing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagecore import ImageTensor

PSNR_CAP_DB = 100.0
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2


@dataclass(frozen=True)
class MetricsRow:
    success: bool
    linf: float
    l2: float
    psnr: float
    ssim: float

    def to_json(self) -> dict:
        return {"success": bool(self.success), "linf": self.linf, "l2": self.l2,
                "psnr": self.psnr, "ssim": self.ssim}


def _diff(a: ImageTensor, b: ImageTensor) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.asarray(a.data, dtype=np.float64) - np.asarray(b.data, dtype=np.float64)


def linf_dist(a: ImageTensor, b: ImageTensor) -> float:
    """max |a - b| / 255."""
    return float(np.abs(_diff(a, b)).max() / 255.0)


def l2_dist(a: ImageTensor, b: ImageTensor) -> float:
    """Euclidean norm of the /255-normalized difference over the full tensor."""
    return float(np.linalg.norm(_diff(a, b).ravel() / 255.0))


def psnr(a: ImageTensor, b: ImageTensor) -> float:
    """10*log10(255^2 / MSE) in dB, capped at the 100 dB sentinel."""
    mse = float(np.mean(_diff(a, b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(255.0 ** 2 / mse)), PSNR_CAP_DB)


def ssim(a: ImageTensor, b: ImageTensor, window: int = 8) -> float:
    """Mean local SSIM over all stride-1 uniform windows."""
    x = np.asarray(a.data, dtype=np.float64)
    y = np.asarray(b.data, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    x = x.mean(axis=2)
    y = y.mean(axis=2)
    h, w = x.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than the {window}x{window} window")
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mx = wx.mean(axis=(2, 3))
    my = wy.mean(axis=(2, 3))
    vx = (wx ** 2).mean(axis=(2, 3)) - mx ** 2
    vy = (wy ** 2).mean(axis=(2, 3)) - my ** 2
    cxy = (wx * wy).mean(axis=(2, 3)) - mx * my
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)
    den = (mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float((num / den).mean())


def asr(successes) -> float:
    """Attack success rate over already-filtered results (the skip-
    misclassified policy is applied upstream)."""
    successes = [bool(s) for s in successes]
    if not successes:
        raise ValueError("asr needs a nonempty result list")
    return sum(successes) / len(successes)


def measure(x_adv: ImageTensor, x_ori: ImageTensor, success: bool) -> MetricsRow:
    return MetricsRow(success=bool(success),
                      linf=linf_dist(x_adv, x_ori),
                      l2=l2_dist(x_adv, x_ori),
                      psnr=psnr(x_adv, x_ori),
                      ssim=ssim(x_adv, x_ori))
