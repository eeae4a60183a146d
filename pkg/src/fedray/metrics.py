"""Image-quality metrics and CSV reporting.

PSNR uses MAX = 1.0 and reports a 99.0 dB sentinel for identical
images. SSIM converts to ITU-R 601 luma and averages the local score
over sliding 8x8 uniform windows (not Gaussian-weighted, so values are
not directly comparable to Gaussian-window implementations).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["mse", "psnr", "ssim", "ViewMetrics", "EvalReport", "evaluate_views",
           "emit_csv", "PSNR_CAP"]

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 8
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _check_pair(img_a: np.ndarray, img_b: np.ndarray):
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(img_a: np.ndarray, img_b: np.ndarray) -> float:
    a, b = _check_pair(img_a, img_b)
    return float(np.mean((a - b) ** 2))


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    err = mse(img_a, img_b)
    if err == 0.0:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / err))


def _luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA_WEIGHTS if img.ndim == 3 else img


def _window_means(gray: np.ndarray, size: int) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(gray, (size, size))
    return windows.mean(axis=(-2, -1))


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean local structural similarity over uniform windows."""
    a, b = _check_pair(img_a, img_b)
    ga, gb = _luma(a), _luma(b)
    size = min(SSIM_WINDOW, *ga.shape)  # smaller images use one global window
    mu_a = _window_means(ga, size)
    mu_b = _window_means(gb, size)
    var_a = _window_means(ga * ga, size) - mu_a ** 2
    var_b = _window_means(gb * gb, size) - mu_b ** 2
    cov = _window_means(ga * gb, size) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2))
    return float(score.mean())


@dataclass(frozen=True)
class ViewMetrics:
    view: int
    mse: float
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    """Per-view metrics for one pipeline stage (Init, Base, or Fed)."""

    stage: str
    rows: list[ViewMetrics] = field(default_factory=list)

    @property
    def mean_mse(self) -> float:
        return float(np.mean([r.mse for r in self.rows]))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))


def evaluate_views(stage: str, rendered: list[np.ndarray],
                   truths: list[np.ndarray]) -> EvalReport:
    if len(rendered) != len(truths):
        raise ValueError("rendered/truth view counts differ")
    rows = [ViewMetrics(view=i, mse=mse(r, t), psnr=psnr(r, t), ssim=ssim(r, t))
            for i, (r, t) in enumerate(zip(rendered, truths))]
    return EvalReport(stage=stage, rows=rows)


CSV_HEADER = ["stage", "view", "mse", "psnr", "ssim"]


def emit_csv(reports: list[EvalReport], path: Path) -> None:
    """One row per (stage, view), full float precision, fixed ordering."""
    buf = io.StringIO()
    buf.write("# lpips omitted: needs a pretrained perceptual network\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for report in reports:
        for row in report.rows:
            writer.writerow([report.stage, row.view, f"{row.mse:.17g}",
                             f"{row.psnr:.17g}", f"{row.ssim:.17g}"])
    Path(path).write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))
