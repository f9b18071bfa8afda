"""RMSE, L1 and SSIM between images.

By default images are compared after the display transform (exposure,
Reinhard, sRGB), i.e. on values in [0, 1]. ``linear=True`` compares raw
radiance.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .imageio import tonemap

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return 0.2126 * img[..., 0] + 0.7152 * img[..., 1] + 0.0722 * img[..., 2]


def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(x, k):
    """Separable correlation keeping only windows fully inside the image."""
    r = len(k) // 2
    y = correlate1d(correlate1d(x, k, axis=0, mode="constant"), k, axis=1, mode="constant")
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b)
    a, b = luminance(a), luminance(b)
    if min(a.shape) < SSIM_WINDOW:
        raise MetricError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    k = _gauss_kernel()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    saa = _filter_valid(a * a, k) - mu_a**2
    sbb = _filter_valid(b * b, k) - mu_b**2
    sab = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM of the luminance channel (11x11 Gaussian window, sigma 1.5)."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise MetricError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if np.array_equal(a, b):
        return 1.0
    return float(np.mean(ssim_map(a, b, data_range)))


@dataclass
class MetricReport:
    rmse: float
    l1: float
    ssim: float
    meta: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {**{k: v for k, v in self.meta.items()}, "rmse": self.rmse, "l1": self.l1, "ssim": self.ssim}


def display(img, exposure: float = 1.0) -> np.ndarray:
    return tonemap(img, exposure)


def compare(a, b, linear: bool = False, exposure: float = 1.0, **meta) -> MetricReport:
    """All three metrics; display-referred unless ``linear``."""
    a, b = _pair(a, b)
    if not linear:
        a, b = display(a, exposure), display(b, exposure)
    return MetricReport(rmse(a, b), l1(a, b), ssim(a, b), {"linear": linear, **meta})


def append_csv(path, reports: list[MetricReport]) -> Path:
    """Append rows in the given order; header written when the file is new."""
    path = Path(path)
    rows = [r.row() for r in reports]
    if not rows:
        return path
    fields = list(rows[0].keys())
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerows(rows)
    return path


def report_dict(r: MetricReport) -> dict:
    return asdict(r)
