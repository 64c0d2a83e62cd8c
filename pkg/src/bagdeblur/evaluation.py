"""PSNR, SSIM, per-image runtime, and aggregate reporting."""

import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .data import denormalize
from .errors import DataError

# Full-scale training reference (300 epochs, GoPro test split). These are
# documentation constants only; desk-scale runs do not reach them.
FULL_SCALE_REFERENCE = {"psnr_db": 29.4, "ssim": 0.89, "runtime_s": 1.13}

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b, peak=255.0):
    """10*log10(peak^2 / MSE) over all channels of two same-shape 8-bit
    images. Identical images return math.inf (excluded from aggregates).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DataError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalized 2-D Gaussian window (sums to 1)."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _local_mean(x, window):
    # correlate then trim: equals valid-mode windowed statistics
    m = window.shape[0] // 2
    full = ndimage.correlate(x, window, mode="constant")
    return full[m:-m, m:-m]


def _ssim_channel(a, b, window, c1, c2):
    mu_a = _local_mean(a, window)
    mu_b = _local_mean(b, window)
    var_a = _local_mean(a * a, window) - mu_a * mu_a
    var_b = _local_mean(b * b, window) - mu_b * mu_b
    cov = _local_mean(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak=255.0):
    """Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5,
    K1=0.01, K2=0.03, dynamic range `peak`), per channel, averaged.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DataError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise DataError(f"ssim: images must be at least {SSIM_WINDOW} pixels per side")
    window = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    scores = [_ssim_channel(ca.astype(np.float64), cb.astype(np.float64),
                            window, c1, c2)
              for ca, cb in zip(a, b)]
    return float(np.mean(scores))


@dataclass
class MetricsReport:
    """Per-image records plus aggregates; aggregates are the arithmetic
    means of the finite per-image values."""
    records: list = field(default_factory=list)
    method: str = "bagdeblur"

    def add(self, identifier, psnr_db, ssim_value, runtime_s, error=None):
        self.records.append({
            "identifier": identifier,
            "psnr_db": psnr_db,
            "ssim": ssim_value,
            "runtime_s": runtime_s,
            "error": error,
        })

    def _finite(self, key):
        vals = [r[key] for r in self.records
                if r["error"] is None and r[key] is not None
                and math.isfinite(r[key])]
        return vals

    @property
    def mean_psnr_db(self):
        vals = self._finite("psnr_db")
        return float(np.mean(vals)) if vals else None

    @property
    def mean_ssim(self):
        vals = self._finite("ssim")
        return float(np.mean(vals)) if vals else None

    @property
    def mean_runtime_s(self):
        vals = self._finite("runtime_s")
        return float(np.mean(vals)) if vals else None

    @property
    def failures(self):
        return [r for r in self.records if r["error"] is not None]

    def to_dict(self):
        return {
            "method": self.method,
            "records": [
                {**r, "psnr_db": ("inf" if r["psnr_db"] is not None
                                  and math.isinf(r["psnr_db"]) else r["psnr_db"])}
                for r in self.records
            ],
            "aggregates": {
                "mean_psnr_db": self.mean_psnr_db,
                "mean_ssim": self.mean_ssim,
                "mean_runtime_s": self.mean_runtime_s,
                "images": len(self.records),
                "failures": len(self.failures),
            },
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self):
        def fmt(v, spec):
            return "n/a" if v is None else format(v, spec)
        lines = [
            f"{'Method':<20}{'PSNR(dB)':>10}{'SSIM':>8}{'Time':>10}",
            f"{self.method:<20}{fmt(self.mean_psnr_db, '.2f'):>10}"
            f"{fmt(self.mean_ssim, '.4f'):>8}{fmt(self.mean_runtime_s, '.3f'):>9}s",
        ]
        if self.failures:
            lines.append(f"({len(self.failures)} image(s) failed)")
        return "\n".join(lines) + "\n"


def _timed_forward(generator, blurred, timing_runs, warmup):
    """Median wall time of `timing_runs` forwards after `warmup` extras."""
    with torch.no_grad():
        for _ in range(warmup):
            generator(blurred)
        times = []
        restored = None
        for _ in range(max(1, timing_runs)):
            t0 = time.perf_counter()
            restored, _ = generator(blurred)
            times.append(time.perf_counter() - t0)
    return restored, float(np.median(times))


def evaluate_generator(generator, index, timing_runs=3, warmup=1, limit=None,
                       method="bagdeblur"):
    """Restore every pair of the index, timing the forward pass (file I/O
    excluded) and scoring PSNR/SSIM on the 8-bit outputs. Per-image failures
    are recorded and evaluation continues.
    """
    if len(index) == 0:
        raise DataError("evaluation index is empty")
    generator.eval()
    report = MetricsReport(method=method)
    n = len(index) if limit is None else min(limit, len(index))
    for i in range(n):
        identifier = index.pairs[i][0]
        try:
            sample = index.load_pair(i)
            blurred = torch.from_numpy(sample.blurred).unsqueeze(0)
            restored, runtime = _timed_forward(generator, blurred,
                                               timing_runs, warmup)
            restored_u8 = denormalize(restored.squeeze(0).numpy())
            sharp_u8 = denormalize(sample.sharp)
            p = psnr(restored_u8, sharp_u8)
            if math.isinf(p):
                warnings.warn(f"{identifier}: identical images, PSNR is inf "
                              "and excluded from the mean")
            report.add(identifier, p, ssim(restored_u8, sharp_u8), runtime)
        except Exception as e:
            report.add(identifier, None, None, None,
                       error=f"{type(e).__name__}: {e}")
    return report


def evaluate_checkpoint(checkpoint_path, index, timing_runs=3, warmup=1,
                        limit=None):
    """Load a checkpoint's generator and evaluate it over the index."""
    from .training import load_generator
    generator = load_generator(checkpoint_path)
    return evaluate_generator(generator, index, timing_runs=timing_runs,
                              warmup=warmup, limit=limit,
                              method=Path(checkpoint_path).stem)
