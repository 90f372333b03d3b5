"""Image quality metrics: PSNR and single-scale SSIM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import DimensionMismatch, ImageTooSmall

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """10 log10(1 / MSE) over all channels for images in [0, 1]; identical -> 99 dB."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def ssim(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5).

    Images are converted to grayscale by channel mean and the index is
    averaged over valid window positions only.
    """
    a = _to_gray(image_a)
    b = _to_gray(image_b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ImageTooSmall(f"image {a.shape} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)

    mu_a = convolve2d(a, w, mode="valid")
    mu_b = convolve2d(b, w, mode="valid")
    var_a = convolve2d(a * a, w, mode="valid") - mu_a**2
    var_b = convolve2d(b * b, w, mode="valid") - mu_b**2
    cov = convolve2d(a * b, w, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


@dataclass
class MetricReport:
    """Per-frame PSNR/SSIM plus arithmetic means."""

    entries: list[dict] = field(default_factory=list)  # frame, camera, e, psnr, ssim

    def add(self, frame: int, camera: int, e: float, psnr_db: float, ssim_val: float):
        self.entries.append(
            {"frame": frame, "camera": camera, "e": e, "psnr": psnr_db, "ssim": ssim_val}
        )

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([x["psnr"] for x in self.entries]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([x["ssim"] for x in self.entries]))

    def to_text(self) -> str:
        lines = ["frame, camera, e, psnr, ssim"]
        for x in self.entries:
            lines.append(
                "%d, %d, %.6g, %.4f, %.6f" % (x["frame"], x["camera"], x["e"], x["psnr"], x["ssim"])
            )
        lines.append("mean_psnr %.4f" % self.mean_psnr)
        lines.append("mean_ssim %.6f" % self.mean_ssim)
        return "\n".join(lines) + "\n"
