"""PSNR, MSE and SSIM on the Y channel with a border crop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import rgb_to_y

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr: float  # dB, inf for identical images
    mse: float  # on the 0-255 scale
    ssim: float
    border_crop: int
    id: str = ""


def _luma(img: np.ndarray, border_crop: int, studio: bool = False) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3:
        y = rgb_to_y(img, studio)[0]
    elif img.ndim == 3 and img.shape[0] == 1:
        y = img[0]
    elif img.ndim == 2:
        y = img
    else:
        raise ValueError(f"expected 3 x H x W, 1 x H x W or H x W image, got shape {img.shape}")
    if border_crop < 0:
        raise ValueError(f"border_crop must be >= 0, got {border_crop}")
    if border_crop:
        y = y[border_crop:-border_crop, border_crop:-border_crop]
    if y.size == 0:
        raise ValueError(f"border crop of {border_crop} leaves an empty image")
    return y


def _pair(pred, ref, border_crop, studio=False):
    pred, ref = np.asarray(pred), np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    return _luma(pred, border_crop, studio), _luma(ref, border_crop, studio)


def psnr_mse(pred: np.ndarray, ref: np.ndarray, border_crop: int = 0, studio: bool = False) -> tuple[float, float]:
    """Return (PSNR in dB with peak 255, MSE on the 0-255 scale)."""
    a, b = _pair(pred, ref, border_crop, studio)
    mse_unit = float(np.mean((a - b) ** 2))
    if mse_unit == 0.0:
        return math.inf, 0.0
    return 10.0 * math.log10(1.0 / mse_unit), mse_unit * 255.0 ** 2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(pred: np.ndarray, ref: np.ndarray, border_crop: int = 0, data_range: float = 1.0, studio: bool = False) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over valid positions."""
    a, b = _pair(pred, ref, border_crop, studio)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window after crop")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def evaluate_pair(pred: np.ndarray, ref: np.ndarray, border_crop: int = 0, id: str = "", studio: bool = False) -> MetricReport:
    p, m = psnr_mse(pred, ref, border_crop, studio)
    return MetricReport(p, m, ssim(pred, ref, border_crop, studio=studio), border_crop, id)


def aggregate(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-image metrics averaged over the set."""
    if not reports:
        raise ValueError("no reports to aggregate")
    crops = {r.border_crop for r in reports}
    if len(crops) != 1:
        raise ValueError(f"mixed border crops {sorted(crops)}")
    return MetricReport(
        psnr=float(np.mean([r.psnr for r in reports])),
        mse=float(np.mean([r.mse for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        border_crop=crops.pop(),
        id="mean",
    )


def format_report(reports: Sequence[MetricReport]) -> str:
    """``id psnr mse ssim`` lines plus the aggregate row."""
    lines = [f"# id psnr mse ssim  (Y channel, border_crop={reports[0].border_crop}, per-image mean)"]
    for r in list(reports) + [aggregate(reports)]:
        lines.append(f"{r.id} {r.psnr:.4f} {r.mse:.4f} {r.ssim:.4f}")
    return "\n".join(lines) + "\n"


def write_report(reports: Sequence[MetricReport], path: str | Path) -> None:
    """Text report at ``path`` and a JSON dump next to it."""
    path = Path(path)
    path.write_text(format_report(reports))
    payload = {"images": [asdict(r) for r in reports], "mean": asdict(aggregate(reports))}
    path.with_suffix(".json").write_text(json.dumps(payload, indent=2))
