import numpy as np
import pytest

from hydravton.metrics import MetricsReport, metrics_report, ssim
from hydravton.rng import Rng
from hydravton.tensor import ShapeError


def ssim_oracle(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct per-window evaluation of the similarity formula (independent
    of the production path: explicit 2-D window, no separable filtering)."""
    r = np.arange(win) - (win - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w2d = np.outer(g, g)
    w2d /= w2d.sum()
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    h, w = a.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            pa = a[i : i + win, j : j + win]
            pb = b[i : i + win, j : j + win]
            mu_a = (w2d * pa).sum()
            mu_b = (w2d * pb).sum()
            va = (w2d * pa * pa).sum() - mu_a**2
            vb = (w2d * pb * pb).sum() - mu_b**2
            cov = (w2d * pa * pb).sum() - mu_a * mu_b
            c1, c2 = k1**2, k2**2
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
            )
    return float(np.mean(vals))


def test_identical_images_score_one():
    img = Rng(1).uniform((3, 32, 24))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_negative_image_scores_low():
    img = Rng(2).uniform((3, 32, 24))
    assert ssim(img, 1.0 - img) < 0.2


def test_matches_independent_oracle():
    rng = Rng(3)
    a = rng.uniform((20, 18))
    b = np.clip(a + rng.normal((20, 18), std=0.1), 0, 1).astype(np.float32)
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-4)


def test_symmetry():
    rng = Rng(4)
    a, b = rng.uniform((3, 24, 24)), rng.uniform((3, 24, 24))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-7)


def test_in_range():
    rng = Rng(5)
    for _ in range(5):
        v = ssim(rng.uniform((16, 16)), rng.uniform((16, 16)))
        assert -1.0 <= v <= 1.0


def test_dim_mismatch():
    with pytest.raises(ShapeError):
        ssim(np.zeros((3, 16, 16), np.float32), np.zeros((3, 16, 12), np.float32))


def test_too_small_rejected():
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8), np.float32), np.zeros((8, 8), np.float32))


def test_report_aggregates():
    rng = Rng(6)
    pairs = [(rng.uniform((3, 16, 16)), rng.uniform((3, 16, 16))) for _ in range(3)]
    pairs.append((pairs[0][0], pairs[0][0]))
    rep = metrics_report(pairs, config={"seed": 1})
    assert isinstance(rep, MetricsReport)
    assert len(rep.per_pair) == 4
    assert rep.per_pair[3] == pytest.approx(1.0)
    assert rep.mean == pytest.approx(np.mean(rep.per_pair))
    assert all(-1.0 <= v <= 1.0 for v in rep.per_pair)
    assert len(rep.config_digest) == 16
