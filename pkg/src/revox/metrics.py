"""Image quality metrics (PSNR, SSIM) and the metrics CSV format."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images return the 99 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_KERNEL = _gaussian_window()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2D correlation keeping only fully-covered (valid) windows."""
    win = kernel.shape[0]
    patches = np.lib.stride_tricks.sliding_window_view(img, (win, win))
    return np.tensordot(patches, kernel, axes=([2, 3], [0, 1]))


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    k = _SSIM_KERNEL
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a * mu_a
    var_b = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Accepts single-channel (H, W) or RGB (H, W, 3) images with a dynamic range
    of 1.0; RGB scores are averaged over channels.  Only windows fully inside
    the image contribute (no padding).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        channels = [(a, b)]
    elif a.ndim == 3 and a.shape[2] == 3:
        channels = [(a[..., c], b[..., c]) for c in range(3)]
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) images, got shape {a.shape}")
    h, w = a.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(np.mean([_ssim_channel(ca, cb) for ca, cb in channels]))


# --- metrics table ----------------------------------------------------------------


@dataclass
class MetricsRow:
    round_index: int
    view: str
    psnr: float
    ssim: float


def round_means(rows: list[MetricsRow]) -> dict[int, tuple[float, float]]:
    """Per-round (mean psnr, mean ssim) over the per-view rows."""
    by_round: dict[int, list[MetricsRow]] = {}
    for row in rows:
        if row.view != "MEAN":
            by_round.setdefault(row.round_index, []).append(row)
    return {
        r: (
            float(np.mean([v.psnr for v in views])),
            float(np.mean([v.ssim for v in views])),
        )
        for r, views in sorted(by_round.items())
    }


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    """Write per-view rows grouped by round, each group followed by its MEAN row."""
    means = round_means(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "view", "psnr", "ssim"])
        for r in sorted(means):
            for row in rows:
                if row.round_index == r and row.view != "MEAN":
                    writer.writerow([r, row.view, f"{row.psnr:.6f}", f"{row.ssim:.6f}"])
            mp, ms = means[r]
            writer.writerow([r, "MEAN", f"{mp:.6f}", f"{ms:.6f}"])


def read_metrics_csv(path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["round", "view", "psnr", "ssim"]:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        for rec in reader:
            rows.append(MetricsRow(int(rec[0]), rec[1], float(rec[2]), float(rec[3])))
    return rows
