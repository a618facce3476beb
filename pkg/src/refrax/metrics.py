"""Image and depth metrics, and per-scene report aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP = 99.0
LUMA = np.array([0.2126, 0.7152, 0.0722])


class MetricError(ValueError):
    pass


def _select(a, b, mask):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is None:
        return a.reshape(-1), b.reshape(-1)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:mask.ndim]:
        raise MetricError("mask does not match image size")
    if not mask.any():
        raise MetricError("mask selects no pixels")
    return a[mask].reshape(-1), b[mask].reshape(-1)


def psnr(a, b, mask=None):
    x, y = _select(a, b, mask)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r * r / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean local SSIM of the luminance channels (dynamic range 1)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a @ LUMA, b @ LUMA
    if min(a.shape) < window:
        raise MetricError(f"image smaller than the {window}x{window} window")
    if np.array_equal(a, b):
        return 1.0
    w = _gaussian_window(window, sigma)

    def filt(x):
        return convolve2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = k1 ** 2, k2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def dmae(pred, gt, mask=None):
    x, y = _select(pred, gt, mask)
    return float(np.mean(np.abs(x - y)))


COLUMNS = ("PSNR", "PSNR_M", "SSIM", "LPIPS", "DMAE")


@dataclass
class EvalReport:
    scene: str
    method: str
    views: list = field(default_factory=list)  # dicts with the COLUMNS keys (LPIPS None)

    def add(self, psnr_v, psnr_m, ssim_v, dmae_v):
        self.views.append({"PSNR": psnr_v, "PSNR_M": psnr_m, "SSIM": ssim_v, "LPIPS": None,
                           "DMAE": dmae_v})

    def mean(self, key):
        vals = [v[key] for v in self.views if v[key] is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def means(self):
        return {k: self.mean(k) for k in COLUMNS}

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(("scene", "method", "view") + COLUMNS)
        rows = [(str(i), v) for i, v in enumerate(self.views)] + [("mean", self.means)]
        for name, v in rows:
            wr.writerow((self.scene, self.method, name)
                        + tuple("" if v[k] is None else repr(float(v[k])) for k in COLUMNS))
        return buf.getvalue()

    def to_text(self):
        head = f"{'scene':<16}{'method':<24}" + "".join(f"{c:>9}" for c in COLUMNS)
        m = self.means
        cells = "".join(f"{'-':>9}" if m[c] is None else f"{m[c]:>9.4f}" for c in COLUMNS)
        return head + "\n" + f"{self.scene:<16}{self.method:<24}" + cells + "\n"
