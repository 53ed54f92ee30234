import hashlib

import numpy as np
import pytest

from hydravton.dataset import (
    PALETTE,
    AugmentPolicy,
    TrainBatch,
    augment,
    collate,
    load_dataset,
    save_dataset,
    synth_dataset,
)
from hydravton.rng import Rng

GOLDEN_SAMPLE_SHA256 = "a2b822052da6d9715e04af36725a74028aa999c66e33e427f9985cc2eb6fbd50"


def sample_digest(s):
    h = hashlib.sha256()
    for arr in (s.person, s.garments[0], s.pose, s.mask, s.text_ids.astype(np.float32)):
        h.update(arr.tobytes())
    return h.hexdigest()


def test_synth_golden_hash():
    s = synth_dataset(1, Rng(1234), latent_hw=(8, 6), n_garments=1)[0]
    assert sample_digest(s) == GOLDEN_SAMPLE_SHA256


def test_synth_images_in_codec_range():
    from hydravton.unet import LatentCodec

    codec = LatentCodec()
    for s in synth_dataset(3, Rng(5)):
        back = codec.decode(codec.encode(s.person))
        assert back.tobytes() == s.person.tobytes()
        for g in s.garments:
            assert codec.decode(codec.encode(g)).tobytes() == g.tobytes()


def test_worn_garment_overlaps_torso():
    for s in synth_dataset(6, Rng(6)):
        kp = s.keypoints[0]
        ls, rs = kp.xy("l_shoulder"), kp.xy("r_shoulder")
        lh, rh = kp.xy("l_hip"), kp.xy("r_hip")
        top, bottom = int(ls[1]), int(lh[1])
        left, right = int(ls[0]), int(rs[0])
        torso = s.person[0][:, top:bottom, left:right]
        garment_colors = {tuple(np.round(c, 3)) for c in PALETTE}
        pixels = torso.reshape(3, -1).T
        hits = sum(tuple(np.round(p, 3)) in garment_colors for p in pixels)
        assert hits / len(pixels) > 0.5


def test_keypoints_consistent_with_silhouette():
    for s in synth_dataset(5, Rng(7)):
        kp = s.keypoints[0]
        assert kp.xy("l_shoulder")[1] < kp.xy("l_hip")[1]
        assert kp.xy("r_shoulder")[1] < kp.xy("r_hip")[1]
        assert kp.xy("neck")[1] <= kp.xy("l_shoulder")[1]
        h, w = s.person.shape[2:]
        for name in kp.joints:
            x, y, conf = kp.joints[name]
            assert 0 <= x < w and 0 <= y < h and conf == 1.0


def test_text_slot_matches_upper_garment_palette():
    for s in synth_dataset(4, Rng(8)):
        slot = int(s.text_ids[0])
        base = PALETTE[slot]
        g = s.garments[0][0].reshape(3, -1).T
        assert any(np.allclose(p, base, atol=1e-6) for p in g)


def test_long_garment_cadence():
    from hydravton.maskgen import garment_bbox

    samples = synth_dataset(8, Rng(9), long_garment_every=4)
    sigmas = []
    for s in samples:
        w, h = garment_bbox(s.garments[0][0])
        sigmas.append(h / w)
    assert sigmas[0] > 1.2 and sigmas[4] > 1.2


def test_dataset_save_load_round_trip(tmp_path):
    samples = synth_dataset(3, Rng(10), n_garments=2)
    save_dataset(tmp_path, samples)
    back = load_dataset(tmp_path)
    assert len(back) == 3
    for a, b in zip(samples, back):
        # images go through 8-bit files; mask and keypoints are exact
        assert np.abs(a.person - b.person).max() <= 1 / 255 + 1e-6
        assert a.mask.tobytes() == b.mask.tobytes()
        assert a.keypoints[0].joints == b.keypoints[0].joints
        assert a.text_ids.tolist() == b.text_ids.tolist()
        assert len(b.garments) == 2


def test_collate_stacks_batches():
    batch = collate(synth_dataset(4, Rng(11), n_garments=2))
    assert batch.person.shape[0] == 4
    assert len(batch.garments) == 2 and batch.garments[0].shape[0] == 4
    assert len(batch.keypoints) == 4 and batch.text_ids.shape == (4,)


# -- augmentation -----------------------------------------------------------------


def force(policy_p):
    return AugmentPolicy(op_probability=policy_p)


def test_augment_all_off_is_identity():
    batch = collate(synth_dataset(2, Rng(12)))
    out = augment(batch, force(0.0), Rng(13))
    assert out.person.tobytes() == batch.person.tobytes()
    assert out.pose.tobytes() == batch.pose.tobytes()
    assert out.mask.tobytes() == batch.mask.tobytes()
    assert out.keypoints[0].joints == batch.keypoints[0].joints


def test_flip_twice_is_identity():
    batch = collate(synth_dataset(1, Rng(14)))

    class FlipOnly(AugmentPolicy):
        pass

    policy = AugmentPolicy(op_probability=1.0, pad_max=0.0, hue_limit_deg=0.0, contrast_lo=1.0, contrast_hi=1.0)
    once = augment(batch, policy, Rng(15))
    twice = augment(once, policy, Rng(16))
    np.testing.assert_allclose(twice.person, batch.person, atol=1e-6)
    np.testing.assert_allclose(twice.pose, batch.pose, atol=1e-6)
    for name, (x, y, c) in batch.keypoints[0].joints.items():
        x2, y2, c2 = twice.keypoints[0].joints[name]
        assert (x2, y2) == pytest.approx((x, y), abs=1e-9)


def test_flip_swaps_left_right_joints():
    batch = collate(synth_dataset(1, Rng(17)))
    policy = AugmentPolicy(op_probability=1.0, pad_max=0.0, hue_limit_deg=0.0, contrast_lo=1.0, contrast_hi=1.0)
    out = augment(batch, policy, Rng(18))
    W = batch.person.shape[3]
    lx = batch.keypoints[0].joints["l_shoulder"][0]
    assert out.keypoints[0].joints["r_shoulder"][0] == pytest.approx(W - 1 - lx)


def test_augment_preserves_dims_and_bounds():
    batch = collate(synth_dataset(2, Rng(19)))
    rng = Rng(20)
    for _ in range(30):
        out = augment(batch, AugmentPolicy(), rng)
        assert out.person.shape == batch.person.shape
        assert out.pose.shape == batch.pose.shape
        assert out.mask.shape == batch.mask.shape
        assert set(np.unique(out.mask)).issubset({0.0, 1.0})
        h, w = out.person.shape[2:]
        for kp in out.keypoints:
            for x, y, c in kp.joints.values():
                assert 0 <= x < w and 0 <= y < h


def test_same_draw_applied_to_person_and_garment():
    # contrast-only policy: person and garment must receive the same factor
    batch = collate(synth_dataset(1, Rng(21)))
    policy = AugmentPolicy(op_probability=1.0, pad_max=0.0, hue_limit_deg=0.0)
    out = augment(batch, policy, Rng(22))

    def contrast_of(before, after):
        # pixels far enough from mid-gray to measure, close enough not to clip
        dev = np.abs(before - 0.5)
        mask = (dev > 0.1) & (dev < 0.35)
        return np.median((after[mask] - 0.5) / (before[mask] - 0.5))

    cp = contrast_of(batch.person[..., ::-1], out.person)  # flip also triggered
    cg = contrast_of(batch.garments[0][..., ::-1], out.garments[0])
    assert cp == pytest.approx(cg, abs=1e-3)


def test_augment_trigger_statistics():
    rng = Rng(23)
    policy = AugmentPolicy()
    batch = collate(synth_dataset(1, Rng(24)))
    n = 10_000
    flips = hues = 0
    W = batch.person.shape[3]
    base_x = batch.keypoints[0].joints["l_shoulder"][0]
    for _ in range(n):
        # draw order is flip, pad(+amount), hue(+amount), contrast(+amount)
        flip = rng.bernoulli(policy.op_probability)
        if rng.bernoulli(policy.op_probability):
            rng.uniform((), 0.0, policy.pad_max)
        hue = rng.bernoulli(policy.op_probability)
        if hue:
            deg = float(rng.uniform((), -policy.hue_limit_deg, policy.hue_limit_deg))
            assert -5.0 <= deg <= 5.0
        if rng.bernoulli(policy.op_probability):
            c = float(rng.uniform((), policy.contrast_lo, policy.contrast_hi))
            assert 0.8 <= c <= 1.2
        flips += flip
        hues += hue
    assert abs(flips / n - 0.5) <= 0.02
    assert abs(hues / n - 0.5) <= 0.02


def test_hue_stays_in_range_and_applied():
    batch = collate(synth_dataset(1, Rng(25)))
    policy = AugmentPolicy(op_probability=1.0, pad_max=0.0, contrast_lo=1.0, contrast_hi=1.0)
    out = augment(batch, policy, Rng(26))
    assert out.person.min() >= 0.0 and out.person.max() <= 1.0
