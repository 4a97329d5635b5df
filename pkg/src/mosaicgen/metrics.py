"""Global-fidelity metrics: PSNR, SSIM, and multi-scale pyramid error."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .imageops import (
    PYRAMID_SIGMA,
    gaussian_blur,
    gaussian_pyramid,
    resize_bilinear,
    rgb_to_luma,
    validate_image,
)

PSNR_CAP_DB = 99.0

DEFAULT_RESOLUTIONS = (32, 64, 128, 256)
DEFAULT_PYRAMID_LEVELS = 4

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 99."""
    a = validate_image(a)
    b = validate_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity with an 11x11 Gaussian window.

    RGB inputs are compared on luminance. Constants follow the standard
    formulation: K1 = 0.01, K2 = 0.03, dynamic range 1.
    """
    a = validate_image(a)
    b = validate_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] == 3:
        a, b = rgb_to_luma(a), rgb_to_luma(b)
    if min(a.shape[1], a.shape[2]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    # radius ceil(3 * 1.5) = 5 gives exactly the 11-tap window
    mu_a = gaussian_blur(a, SSIM_SIGMA)
    mu_b = gaussian_blur(b, SSIM_SIGMA)
    var_a = gaussian_blur(a * a, SSIM_SIGMA) - mu_a**2
    var_b = gaussian_blur(b * b, SSIM_SIGMA) - mu_b**2
    cov = gaussian_blur(a * b, SSIM_SIGMA) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def pyramid_error(ref: np.ndarray, mosaic: np.ndarray, levels: int) -> list[float]:
    """MSE between Gaussian-pyramid levels 1..levels of the two images.

    Coarser levels suppress high frequencies, so the sequence isolates
    agreement in large-scale structure.
    """
    ref = validate_image(ref)
    mosaic = validate_image(mosaic)
    if ref.shape != mosaic.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {mosaic.shape}")
    pa = gaussian_pyramid(ref, levels)
    pb = gaussian_pyramid(mosaic, levels)
    return [float(np.mean((x - y) ** 2)) for x, y in zip(pa, pb)]


@dataclass
class MetricsReport:
    """PSNR/SSIM per evaluation resolution plus pyramid errors and metadata."""

    resolutions: list[int]
    psnr_values: dict[int, float]
    ssim_values: dict[int, float]
    pyramid: list[float]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {}
        for r in self.resolutions:
            doc[f"psnr_{r}"] = self.psnr_values[r]
            doc[f"ssim_{r}"] = self.ssim_values[r]
        for k, e in enumerate(self.pyramid, start=1):
            doc[f"pyramid_e{k}"] = e
        doc["metadata"] = dict(self.metadata)
        return doc

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def eval_report(
    ref: np.ndarray,
    mosaic: np.ndarray,
    resolutions=DEFAULT_RESOLUTIONS,
    pyramid_levels: int = DEFAULT_PYRAMID_LEVELS,
) -> MetricsReport:
    """Resize both images to each resolution for PSNR/SSIM; pyramid at native size.

    Both inputs must be square. When their sizes differ, the mosaic is
    resized to the reference resolution for the pyramid comparison.
    """
    ref = validate_image(ref)
    mosaic = validate_image(mosaic)
    for name, img in (("reference", ref), ("mosaic", mosaic)):
        if img.shape[1] != img.shape[2]:
            raise ValueError(f"{name} must be square, got {img.shape[1]}x{img.shape[2]}")
    psnr_values, ssim_values = {}, {}
    for r in resolutions:
        a = resize_bilinear(ref, r, r)
        b = resize_bilinear(mosaic, r, r)
        psnr_values[r] = psnr(a, b)
        ssim_values[r] = ssim(a, b)
    native = mosaic
    if mosaic.shape != ref.shape:
        native = resize_bilinear(mosaic, ref.shape[1], ref.shape[2])
        if native.shape[0] != ref.shape[0]:
            raise ValueError("channel counts disagree")
    pyramid = pyramid_error(ref, native, pyramid_levels)
    meta = {"pyramid_sigma": PYRAMID_SIGMA, "pyramid_levels": pyramid_levels}
    return MetricsReport(
        resolutions=list(resolutions),
        psnr_values=psnr_values,
        ssim_values=ssim_values,
        pyramid=pyramid,
        metadata=meta,
    )
