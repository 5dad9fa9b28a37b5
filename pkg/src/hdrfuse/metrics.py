"""Image quality metrics and batch evaluation reports.

PSNR and SSIM are each computed in the linear radiance domain and after
log compression.  SSIM follows the standard Gaussian-window formulation
(11 x 11, sigma 1.5) with valid-mode convolution; images smaller than the
window fall back to global statistics with a warning.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import convolve2d
from scipy.signal.windows import gaussian as gaussian_window

from .transforms import mu_law_tonemap

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs return the 99 dB cap.

    Only an exact match is capped: a nonzero MSE that works out above
    99 dB is reported as is.
    """
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(peak * peak / err)


def _ssim_window() -> np.ndarray:
    g = gaussian_window(SSIM_WINDOW, std=SSIM_SIGMA)
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, peak: float) -> float:
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    if min(x.shape) < SSIM_WINDOW:
        warnings.warn(
            f"image {x.shape} smaller than the {SSIM_WINDOW}px SSIM window; "
            "falling back to global statistics", stacklevel=3)
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cxy = ((x - mx) * (y - my)).mean()
        return float(((2 * mx * my + c1) * (2 * cxy + c2))
                     / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    w = _ssim_window()
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(y, w, mode="valid")
    sig_x = convolve2d(x * x, w, mode="valid") - mu_x ** 2
    sig_y = convolve2d(y * y, w, mode="valid") - mu_y ** 2
    sig_xy = convolve2d(x * y, w, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sig_xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sig_x + sig_y + c2)
    return float((num / den).mean())


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    if a.ndim == 2:
        return _ssim_channel(a, b, peak)
    if a.ndim != 3:
        raise ValueError(f"expected H x W or H x W x C, got shape {a.shape}")
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], peak)
                          for c in range(a.shape[-1])]))


def sample_metrics(pred: np.ndarray, gt: np.ndarray,
                   mu: float = 5000.0) -> dict:
    """All four metric variants for one prediction/ground-truth pair."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    pred_mu = mu_law_tonemap(pred, mu)
    gt_mu = mu_law_tonemap(gt, mu)
    return {
        "psnr_l": psnr(pred, gt),
        "psnr_mu": psnr(pred_mu, gt_mu),
        "ssim_l": ssim(pred, gt),
        "ssim_mu": ssim(pred_mu, gt_mu),
        "exact": mse(pred, gt) == 0.0,
    }


METRIC_KEYS = ("psnr_l", "psnr_mu", "ssim_l", "ssim_mu")


@dataclass
class EvalReport:
    """Per-sample metrics plus their means, serializable to JSON and CSV."""

    samples: list = field(default_factory=list)  # dicts with name + metrics
    mu: float = 5000.0

    def add(self, name: str, pred: np.ndarray, gt: np.ndarray) -> dict:
        row = {"name": name, **sample_metrics(pred, gt, self.mu)}
        self.samples.append(row)
        return row

    @property
    def summary(self) -> dict:
        if not self.samples:
            return {k: float("nan") for k in METRIC_KEYS}
        return {k: float(np.mean([s[k] for s in self.samples]))
                for k in METRIC_KEYS}

    def to_dict(self) -> dict:
        return {"mu": self.mu, "samples": self.samples,
                "summary": self.summary}

    def write_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", *METRIC_KEYS, "exact"])
            for s in self.samples:
                writer.writerow([s["name"],
                                 *[f"{s[k]:.6f}" for k in METRIC_KEYS],
                                 int(s["exact"])])
            summ = self.summary
            writer.writerow(["mean",
                             *[f"{summ[k]:.6f}" for k in METRIC_KEYS], ""])
        return path


def evaluate(pairs: Sequence[tuple], mu: float = 5000.0) -> EvalReport:
    """Score (name, prediction, ground truth) triples into a report."""
    report = EvalReport(mu=mu)
    for name, pred, gt in pairs:
        report.add(name, pred, gt)
    return report
