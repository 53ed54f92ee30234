import numpy as np
import pytest

from hydravton import ops
from hydravton.rng import Rng
from hydravton.tensor import Tensor


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    from hydravton import kernels

    kernels.warmup()


def centered_loss(fn, x0, r):
    """Zero-centered linear probe: loss = mean((fn(t) - fn(x0)) * r).

    Centering keeps the scalar near zero, so its float32 rounding does not
    drown the divided difference.
    """
    y0 = Tensor(fn(x0).data.copy())
    rt = r if isinstance(r, Tensor) else Tensor(r)
    return lambda t: ops.mean((fn(t) - y0) * rt)


def conditioned_loss(fn, x0, rng, out_shape, min_ratio=0.05, attempts=50):
    """Centered probe with the direction redrawn until no coordinate of the
    analytic gradient is pathologically small relative to its rms (the
    max-relative-error metric is meaningless on near-zero-gradient
    coordinates, where float32 forward noise dominates)."""
    best = None
    for _ in range(attempts):
        f = centered_loss(fn, x0, rng.normal(out_shape))
        xg = Tensor(x0.data.copy(), requires_grad=True)
        f(xg).backward()
        g = np.abs(xg.grad).astype(np.float64)
        score = float(g.min() / max(np.sqrt((g**2).mean()), 1e-30))
        if best is None or score > best[0]:
            best = (score, f)
        if score >= min_ratio:
            return f
    return best[1]


def tiny_model(n_conditions=1, seed=0, widths=(16, 32), latent_hw=(4, 4)):
    """A scaled-down try-on model for fast structural tests."""
    from hydravton.unet import TryOnConfig, TryOnModel

    cfg = TryOnConfig(
        n_conditions=n_conditions, widths=widths, latent_hw=latent_hw, text_slots=16, text_dim=32
    )
    return TryOnModel(cfg, seed=seed)


def tiny_batch(n_garments=1, seed=7, latent_hw=(4, 4), n=1):
    from hydravton.dataset import collate, synth_dataset

    return collate(synth_dataset(n, Rng(seed), latent_hw=latent_hw, n_garments=n_garments))
