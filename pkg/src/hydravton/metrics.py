"""Structural similarity with the standard 11x11 Gaussian window."""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

_WIN = 11
_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _gaussian_window():
    r = np.arange(_WIN) - (_WIN - 1) / 2.0
    w = np.exp(-(r**2) / (2.0 * _SIGMA**2))
    return w / w.sum()


def _filter_valid(x, w):
    """Separable 'valid' correlation of a 2-D array with the 1-D window."""
    n = w.size
    out = np.zeros((x.shape[0] - n + 1, x.shape[1]), dtype=np.float64)
    for k in range(n):
        out += w[k] * x[k : k + out.shape[0], :]
    out2 = np.zeros((out.shape[0], x.shape[1] - n + 1), dtype=np.float64)
    for k in range(n):
        out2 += w[k] * out[:, k : k + out2.shape[1]]
    return out2


def _ssim_channel(a, b):
    w = _gaussian_window()
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a * mu_a
    var_b = _filter_valid(b * b, w) - mu_b * mu_b
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    c1 = _K1**2
    c2 = _K2**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim(a, b):
    """Mean SSIM over channels of two (3,H,W) or (H,W) images in [0,1]."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ: {list(a.shape)} vs {list(b.shape)}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-2] < _WIN or a.shape[-1] < _WIN:
        raise ShapeError(f"ssim: images must be at least {_WIN}x{_WIN}")
    return float(np.mean([_ssim_channel(a[c], b[c]) for c in range(a.shape[0])]))


@dataclass
class MetricsReport:
    per_pair: list
    mean: float
    std: float
    config_digest: str

    def to_json(self):
        return {
            "ssim_mean": self.mean,
            "ssim_std": self.std,
            "per_pair": self.per_pair,
            "config_digest": self.config_digest,
        }


def metrics_report(pairs, config=None):
    """SSIM over (image, image) pairs plus a digest of the run config."""
    values = [ssim(a, b) for a, b in pairs]
    digest = hashlib.sha256(json.dumps(config or {}, sort_keys=True).encode()).hexdigest()[:16]
    return MetricsReport(
        per_pair=values,
        mean=float(np.mean(values)),
        std=float(np.std(values)),
        config_digest=digest,
    )
