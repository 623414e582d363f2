"""Reference quality metrics: PSNR, SSIM, and a checkerboard-artifact score.

PSNR is computed against a peak of 1.0 on normalized floats and capped at
100 dB so identical images stay finite. SSIM is the canonical formulation:
11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1.0,
valid-region mean, channels averaged. The checkerboard score measures the
fraction of non-DC spectral energy sitting at the Nyquist corner and the
axis-Nyquist bins of the luminance plane, which is where transposed-
convolution grid artifacts concentrate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError
from .synth import rgb_to_mono

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    checkerboard: float


def _as_float_pair(a, b, op):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB against a unit dynamic range."""
    a, b = _as_float_pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))


def _gaussian_kernel():
    half = (SSIM_WINDOW - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


def _ssim_plane(a: np.ndarray, b: np.ndarray) -> float:
    kernel = _gaussian_kernel()
    pad = (SSIM_WINDOW - 1) // 2

    def filt(img):
        out = correlate1d(img, kernel, axis=0, mode="nearest")
        out = correlate1d(out, kernel, axis=1, mode="nearest")
        return out[pad:-pad, pad:-pad]  # interior only: equals valid-mode windows

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean local structural similarity; RGB images average per-channel SSIM."""
    a, b = _as_float_pair(a, b, "ssim")
    if a.ndim == 3:
        if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
            raise ShapeError(f"ssim: image {a.shape} smaller than the {SSIM_WINDOW}px window")
        return float(np.mean([_ssim_plane(a[:, :, c], b[:, :, c]) for c in range(a.shape[2])]))
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"ssim: image {a.shape} smaller than the {SSIM_WINDOW}px window")
    return _ssim_plane(a, b)


def checkerboard_score(img) -> float:
    """Fraction of non-DC spectral energy at the Nyquist corner and axes.

    1-pixel alternation in both directions lands on the (H/2, W/2) bin;
    pure row/column stripes land on (H/2, 0) and (0, W/2). A small (+-1 bin)
    neighborhood around each is pooled. Constant images score 0, and a
    global brightness offset cannot change the score (it only moves DC).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = rgb_to_mono(img)
    if img.ndim != 2:
        raise ShapeError(f"checkerboard_score: expected an image, got shape {img.shape}")
    h, w = img.shape
    if h < 8 or w < 8 or h % 2 or w % 2:
        raise ShapeError(f"checkerboard_score: need even dims >= 8, got {h}x{w}")

    power = np.abs(np.fft.fft2(img)) ** 2
    total = float(power.sum() - power[0, 0])
    if total <= 0.0:
        return 0.0

    def pool(cy, cx):
        acc = 0.0
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                acc += power[(cy + dy) % h, (cx + dx) % w]
        return acc

    # dims >= 8 keep the three pools disjoint and clear of the DC bin
    nyquist = pool(h // 2, w // 2) + pool(0, w // 2) + pool(h // 2, 0)
    return float(min(1.0, nyquist / total))
