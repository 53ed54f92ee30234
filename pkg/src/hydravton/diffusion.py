"""Noise schedule, training objective and the deterministic sampler."""

from dataclasses import dataclass

import numpy as np

from . import ops
from .maskgen import apply_mask
from .tensor import Tensor, no_grad
from .unet import MainNetInput, denoise_step, mask_to_latent, pose_inject


class ScheduleError(ValueError):
    """Timestep or step count outside the schedule."""


class DDIMSchedule:
    """Linear-beta forward process over T=1000 steps with a deterministic
    (eta=0) sampling rule over an evenly strided sub-schedule."""

    def __init__(self, total_steps=1000, beta_start=1e-4, beta_end=2e-2):
        self.total_steps = int(total_steps)
        self.betas = np.linspace(beta_start, beta_end, self.total_steps, dtype=np.float64)
        self.alpha_bars = np.cumprod(1.0 - self.betas)
        if not ((self.alpha_bars > 0) & (self.alpha_bars < 1)).all():
            raise ScheduleError("alpha-bar left (0,1)")
        if not (np.diff(self.alpha_bars) < 0).all():
            raise ScheduleError("alpha-bar not strictly decreasing")

    def alpha_bar(self, t):
        """Cumulative signal fraction at step t; t == -1 means the clean image."""
        t = int(t)
        if t == -1:
            return 1.0
        if not 0 <= t < self.total_steps:
            raise ScheduleError(f"timestep {t} outside schedule [0, {self.total_steps})")
        return float(self.alpha_bars[t])

    def add_noise(self, z0, t, eps):
        t = np.asarray(t, dtype=np.int64)
        if (t < 0).any() or (t >= self.total_steps).any():
            raise ScheduleError(f"timesteps {t.tolist()} outside schedule")
        ab = self.alpha_bars[t][:, None, None, None]
        return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)

    def sampling_timesteps(self, steps):
        if not 1 <= steps <= self.total_steps:
            raise ScheduleError(f"{steps} sampling steps do not fit a {self.total_steps}-step schedule")
        stride = self.total_steps // steps
        ts = [(i + 1) * stride - 1 for i in range(steps)]
        return list(reversed(ts)), stride


def ldm_loss(batch, model, sched, rng, dropout_p=0.1):
    """Noise-prediction MSE with garment dropout.

    Draw order per call: timesteps, noise, then the per-sample dropout
    coins. A dropped sample has all its garment latents replaced by the
    all-zero latent before the encoder runs, so the dropout acts only
    through the fused K/V.
    """
    if not 0.0 <= dropout_p <= 1.0:
        raise ValueError(f"dropout_p must be in [0,1], got {dropout_p}")
    codec = model.codec
    b = batch.person.shape[0]
    z0 = codec.encode(batch.person)
    t = rng.integers(0, sched.total_steps, (b,))
    eps = rng.normal(z0.shape)
    z_t = sched.add_noise(z0, t, eps)

    agn = apply_mask(batch.person, batch.mask)
    agn_lat = codec.encode(agn)
    mask_lat = mask_to_latent(batch.mask)
    g_lats = [codec.encode(g) for g in batch.garments]
    drop = rng.uniform((b,)) < dropout_p
    if drop.any():
        g_lats = [np.where(drop[:, None, None, None], 0.0, g).astype(np.float32) for g in g_lats]

    kv = model.encode_garments(g_lats, batch.text_ids)
    pose_feat = pose_inject(batch.pose, model.pose)
    pred = model.predict_noise(
        MainNetInput(z_t, agn_lat, mask_lat), t, kv, pose_feat, batch.text_ids
    )
    diff = pred - Tensor(eps)
    return ops.mean(diff * diff)


def ddim_trajectory(eps_fn, z_init, sched, steps):
    """Deterministic sampling recursion from pure noise given any noise
    predictor; the model-free core used by oracle tests."""
    ts, stride = sched.sampling_timesteps(steps)
    z = np.ascontiguousarray(z_init, dtype=np.float32)
    for t in ts:
        eps = np.asarray(eps_fn(z, t), dtype=np.float32)
        ab_t = sched.alpha_bar(t)
        ab_prev = sched.alpha_bar(t - stride) if t - stride >= 0 else 1.0
        x0 = (z - np.float32(np.sqrt(1.0 - ab_t)) * eps) * np.float32(1.0 / np.sqrt(ab_t))
        z = np.float32(np.sqrt(ab_prev)) * x0 + np.float32(np.sqrt(1.0 - ab_prev)) * eps
    return z


@dataclass
class SampleInputs:
    """Conditioning bundle for sampling one batch of images."""

    agnostic_latent: np.ndarray
    mask_latent: np.ndarray
    garment_latents: list
    pose_img: np.ndarray = None
    text_ids: np.ndarray = None


def ddim_sample(model, inputs, sched, steps=30, s_g=1.3, rng=None):
    """Full guided sampling: one garment-encoder pass, then `steps`
    generator passes. Returns (final latent, decoded image)."""
    with no_grad():
        b = inputs.agnostic_latent.shape[0]
        lh, lw = model.cfg.latent_hw
        text_ids = (
            np.zeros(b, dtype=np.int64) if inputs.text_ids is None else np.asarray(inputs.text_ids)
        )
        z = rng.normal((b, 4, lh, lw))
        if s_g != 1.0:
            model.null_kv(b, text_ids)  # input-independent; warmed once per weight state
        kv = model.encode_garments(inputs.garment_latents, text_ids)
        pose_feat = pose_inject(inputs.pose_img, model.pose) if inputs.pose_img is not None else None

        def eps_fn(z_t, t):
            inp = MainNetInput(z_t, inputs.agnostic_latent, inputs.mask_latent)
            return denoise_step(
                model, sched, inp, pose_feat, t, kv, s_g=s_g, text_ids=text_ids
            )

        z_final = ddim_trajectory(eps_fn, z, sched, steps)
        return z_final, model.codec.decode(z_final)
