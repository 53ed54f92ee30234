"""Synthetic paired try-on data and the training-time augmentation pipeline.

Samples are rendered at latent resolution and nearest-upsampled by 8, so
every image lies exactly in the latent codec's range. Persons wear a warped
copy of their garment over the torso, with matching keypoints, so pairs are
ground truth by construction.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .maskgen import PoseKeypoints, build_agnostic_mask, load_keypoints, save_keypoints

# 16 garment base colors; the palette index doubles as the text slot id.
PALETTE = np.array(
    [
        [0.85, 0.10, 0.10],
        [0.10, 0.45, 0.85],
        [0.10, 0.65, 0.20],
        [0.90, 0.75, 0.10],
        [0.60, 0.15, 0.70],
        [0.95, 0.45, 0.10],
        [0.10, 0.70, 0.70],
        [0.80, 0.30, 0.55],
        [0.35, 0.25, 0.15],
        [0.25, 0.25, 0.30],
        [0.55, 0.70, 0.30],
        [0.15, 0.25, 0.60],
        [0.70, 0.70, 0.65],
        [0.45, 0.10, 0.20],
        [0.20, 0.55, 0.45],
        [0.60, 0.45, 0.80],
    ],
    dtype=np.float32,
)


@dataclass
class TrainBatch:
    person: np.ndarray  # (b,3,H,W)
    garments: list  # n_conditions arrays of (b,3,H,W)
    pose: np.ndarray  # (b,3,2H,2W)
    mask: np.ndarray  # (b,1,H,W) binary
    keypoints: list  # b PoseKeypoints
    text_ids: np.ndarray  # (b,)

    @property
    def size(self):
        return self.person.shape[0]


def collate(batches):
    """Stack single-sample batches along the batch axis."""
    n_g = len(batches[0].garments)
    return TrainBatch(
        person=np.concatenate([b.person for b in batches]),
        garments=[np.concatenate([b.garments[i] for b in batches]) for i in range(n_g)],
        pose=np.concatenate([b.pose for b in batches]),
        mask=np.concatenate([b.mask for b in batches]),
        keypoints=[kp for b in batches for kp in b.keypoints],
        text_ids=np.concatenate([b.text_ids for b in batches]),
    )


def _upsample8(img):
    return img.repeat(8, axis=-2).repeat(8, axis=-1)


def _draw_line(canvas, p0, p1, color):
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) + 1
    xs = np.round(np.linspace(p0[0], p1[0], 2 * n)).astype(int)
    ys = np.round(np.linspace(p0[1], p1[1], 2 * n)).astype(int)
    h, w = canvas.shape[1:]
    keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    canvas[:, ys[keep], xs[keep]] = np.asarray(color, dtype=np.float32)[:, None]


def _render_garment(r, lh, lw, palette_idx, long_garment):
    g = np.ones((3, lh, lw), dtype=np.float32)
    base = PALETTE[palette_idx]
    gw = max(2, int(round(lw * float(r.uniform((), 0.45, 0.75)))))
    if long_garment:
        gh = min(lh, max(int(round(gw * float(r.uniform((), 1.25, 1.6)))), 2))
    else:
        gh = min(lh - 1, max(int(round(gw * float(r.uniform((), 0.8, 1.15)))), 2))
    top = (lh - gh) // 2
    left = (lw - gw) // 2
    block = np.tile(base[:, None, None], (1, gh, gw))
    if r.bernoulli(0.5):  # stripes in a second palette color
        alt = PALETTE[(palette_idx + 5) % len(PALETTE)]
        block[:, ::2, :] = alt[:, None, None]
    else:  # logo block
        alt = PALETTE[(palette_idx + 9) % len(PALETTE)]
        block[:, gh // 2, gw // 2] = alt
    g[:, top : top + gh, left : left + gw] = block
    return g, (gw, gh)


def render_sample(r, latent_hw=(8, 6), n_garments=1, long_garment=False):
    """One paired sample: laid-out garment(s), a person wearing warped copies,
    keypoints consistent with the silhouette, and the keypoint-derived mask."""
    lh, lw = latent_hw
    H, W = lh * 8, lw * 8
    bg = float(r.uniform((), 0.75, 0.9))
    person = np.full((3, lh, lw), bg, dtype=np.float32)

    torso_top = max(1, int(round(0.25 * lh)))
    torso_bot = int(round(0.6 * lh))  # inclusive
    leg_bot = lh - 1
    c0 = max(1, int(round(0.25 * lw)))
    c1 = lw - 1 - c0
    skin = np.array([0.82, 0.66, 0.54], dtype=np.float32)
    head_col = (c0 + c1) // 2
    person[:, max(0, torso_top - 1), head_col] = skin
    person[:, torso_top : leg_bot + 1, c0 : c1 + 1] = skin[:, None, None]

    slot = int(r.integers(0, len(PALETTE)))
    garments = []
    upper, (gw, gh) = _render_garment(r, lh, lw, slot, long_garment)
    garments.append(upper)
    gl, gt = (lw - gw) // 2, (lh - gh) // 2
    worn_rows = np.round(np.linspace(gt, gt + gh - 1, torso_bot - torso_top + 1)).astype(int)
    worn_cols = np.round(np.linspace(gl, gl + gw - 1, c1 - c0 + 1)).astype(int)
    person[:, torso_top : torso_bot + 1, c0 : c1 + 1] = upper[:, worn_rows][:, :, worn_cols]

    if n_garments > 1:
        slot2 = int(r.integers(0, len(PALETTE)))
        lower, (gw2, gh2) = _render_garment(r, lh, lw, slot2, False)
        garments.append(lower)
        gl2, gt2 = (lw - gw2) // 2, (lh - gh2) // 2
        rows2 = np.round(np.linspace(gt2, gt2 + gh2 - 1, leg_bot - torso_bot)).astype(int)
        cols2 = np.round(np.linspace(gl2, gl2 + gw2 - 1, c1 - c0 + 1)).astype(int)
        if len(rows2):
            person[:, torso_bot + 1 : leg_bot + 1, c0 : c1 + 1] = lower[:, rows2][:, :, cols2]
    while len(garments) < n_garments:
        garments.append(garments[0].copy())

    def px(col, row):  # latent cell -> image pixel center
        return (col * 8 + 4.0, row * 8 + 4.0)

    sx_l, sy = px(c0, torso_top)
    sx_r, _ = px(c1, torso_top)
    hx_l, hy = px(c0, torso_bot)
    hx_r, _ = px(c1, torso_bot)
    arm_drop = 0.18 * H
    arm_out = 0.16 * W
    joints = {
        "neck": [(sx_l + sx_r) / 2, sy - 4.0, 1.0],
        "l_shoulder": [sx_l, sy, 1.0],
        "r_shoulder": [sx_r, sy, 1.0],
        "l_hip": [hx_l, hy, 1.0],
        "r_hip": [hx_r, hy, 1.0],
        "l_elbow": [max(0.0, sx_l - arm_out), sy + arm_drop, 1.0],
        "r_elbow": [min(W - 1.0, sx_r + arm_out), sy + arm_drop, 1.0],
        "l_wrist": [max(0.0, sx_l - 1.4 * arm_out), sy + 2 * arm_drop, 1.0],
        "r_wrist": [min(W - 1.0, sx_r + 1.4 * arm_out), sy + 2 * arm_drop, 1.0],
    }
    kp = PoseKeypoints(joints)
    mask = build_agnostic_mask(kp, (H, W))

    pose = np.zeros((3, 2 * H, 2 * W), dtype=np.float32)
    limbs = [
        ("neck", "l_shoulder", (1, 0, 0)),
        ("neck", "r_shoulder", (0, 1, 0)),
        ("l_shoulder", "l_elbow", (1, 1, 0)),
        ("l_elbow", "l_wrist", (1, 0, 1)),
        ("r_shoulder", "r_elbow", (0, 1, 1)),
        ("r_elbow", "r_wrist", (0, 0, 1)),
        ("l_shoulder", "l_hip", (1, 0.5, 0)),
        ("r_shoulder", "r_hip", (0, 0.5, 1)),
        ("l_hip", "r_hip", (0.5, 1, 0.5)),
    ]
    for a, b, color in limbs:
        pa, pb = kp.xy(a) * 2, kp.xy(b) * 2
        _draw_line(pose, pa, pb, color)

    return TrainBatch(
        person=_upsample8(person)[None],
        garments=[_upsample8(g)[None] for g in garments],
        pose=pose[None],
        mask=mask.mask[None],
        keypoints=[kp],
        text_ids=np.array([slot], dtype=np.int64),
    )


def synth_dataset(n, rng, latent_hw=(8, 6), n_garments=1, long_garment_every=4):
    """n single-sample batches; every long_garment_every-th sample gets a
    long (aspect > 1.2) upper garment so the inference elongation rule has
    work to do."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    return [
        render_sample(
            rng.child(i),
            latent_hw,
            n_garments,
            long_garment=(long_garment_every > 0 and i % long_garment_every == 0),
        )
        for i in range(n)
    ]


def save_dataset(outdir, samples):
    """Write samples as PPM/PGM/JSON files plus an index.json; returns the
    list of written paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    index = {"n": len(samples), "samples": []}
    files = []

    def put(path, writer, *data):
        writer(path, *data)
        files.append(path)
        return path.name

    for i, s in enumerate(samples):
        rec = {
            "person": put(outdir / f"person_{i:04d}.ppm", imageio.write_ppm, s.person[0]),
            "garments": [
                put(outdir / f"garment_{i:04d}_{j}.ppm", imageio.write_ppm, g[0])
                for j, g in enumerate(s.garments)
            ],
            "pose": put(outdir / f"pose_{i:04d}.ppm", imageio.write_ppm, s.pose[0]),
            "mask": put(outdir / f"mask_{i:04d}.pgm", imageio.write_pgm, s.mask[0]),
            "keypoints": put(outdir / f"keypoints_{i:04d}.json", save_keypoints, s.keypoints[0]),
            "text_id": int(s.text_ids[0]),
        }
        index["samples"].append(rec)
    index_path = outdir / "index.json"
    index_path.write_text(json.dumps(index, indent=1))
    files.append(index_path)
    return files


def load_dataset(path):
    """Read a dataset directory written by save_dataset."""
    root = Path(path)
    index_path = root / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"dataset index not found: {index_path}")
    index = json.loads(index_path.read_text())
    samples = []
    for rec in index["samples"]:
        samples.append(
            TrainBatch(
                person=imageio.read_ppm(root / rec["person"])[None],
                garments=[imageio.read_ppm(root / g)[None] for g in rec["garments"]],
                pose=imageio.read_ppm(root / rec["pose"])[None],
                mask=imageio.read_pgm(root / rec["mask"])[None],
                keypoints=[load_keypoints(root / rec["keypoints"])],
                text_ids=np.array([rec["text_id"]], dtype=np.int64),
            )
        )
    return samples


@dataclass
class AugmentPolicy:
    op_probability: float = 0.5
    pad_max: float = 0.1
    hue_limit_deg: float = 5.0
    contrast_lo: float = 0.8
    contrast_hi: float = 1.2


_SWAP = {"l_shoulder": "r_shoulder", "l_elbow": "r_elbow", "l_wrist": "r_wrist", "l_hip": "r_hip"}
_SWAP.update({v: k for k, v in _SWAP.items()})


def _flip_keypoints(kp, width):
    out = {}
    for name, (x, y, conf) in kp.joints.items():
        out[_SWAP.get(name, name)] = [width - 1 - x, y, conf]
    return PoseKeypoints(out)


def _hue_matrix(deg):
    theta = np.deg2rad(deg)
    c, s = np.cos(theta), np.sin(theta)
    one_third = 1.0 / 3.0
    sq = np.sqrt(one_third)
    m = np.full((3, 3), one_third * (1.0 - c))
    m += np.eye(3) * c
    m += s * sq * np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]])
    return m.astype(np.float32)


def _nearest_pad_resize(img, ph, pw, pad_mode):
    h, w = img.shape[-2:]
    pad = [(0, 0)] * (img.ndim - 2) + [(ph, ph), (pw, pw)]
    padded = np.pad(img, pad, mode=pad_mode)
    yi = np.minimum((np.floor((np.arange(h) + 0.5) * (h + 2 * ph) / h)).astype(int), h + 2 * ph - 1)
    xi = np.minimum((np.floor((np.arange(w) + 0.5) * (w + 2 * pw) / w)).astype(int), w + 2 * pw - 1)
    return np.ascontiguousarray(padded[..., yi, :][..., :, xi])


def augment(batch, policy, rng):
    """Draw the four ops independently at the policy probability and apply
    the same draws to person, garments and (geometrically) the pose map and
    keypoints. Draw order: flip, pad(+amount), hue(+amount),
    contrast(+amount); amounts are drawn only when the op triggers."""
    person = batch.person.copy()
    garments = [g.copy() for g in batch.garments]
    pose = batch.pose.copy()
    mask = batch.mask.copy()
    kps = list(batch.keypoints)
    H, W = person.shape[-2:]

    if rng.bernoulli(policy.op_probability):
        person = person[..., ::-1].copy()
        garments = [g[..., ::-1].copy() for g in garments]
        pose = pose[..., ::-1].copy()
        mask = mask[..., ::-1].copy()
        kps = [_flip_keypoints(kp, W) for kp in kps]

    if rng.bernoulli(policy.op_probability):
        frac = float(rng.uniform((), 0.0, policy.pad_max))
        ph, pw = int(round(frac * H)), int(round(frac * W))
        if ph or pw:
            person = _nearest_pad_resize(person, ph, pw, "edge")
            garments = [_nearest_pad_resize(g, ph, pw, "edge") for g in garments]
            pose = _nearest_pad_resize(pose, 2 * ph, 2 * pw, "constant")
            mask = _nearest_pad_resize(mask, ph, pw, "constant")
            scaled = []
            for kp in kps:
                joints = {
                    n: [(x + pw) * W / (W + 2 * pw), (y + ph) * H / (H + 2 * ph), c]
                    for n, (x, y, c) in kp.joints.items()
                }
                scaled.append(PoseKeypoints(joints))
            kps = scaled

    if rng.bernoulli(policy.op_probability):
        deg = float(rng.uniform((), -policy.hue_limit_deg, policy.hue_limit_deg))
        m = _hue_matrix(deg)
        person = np.clip(np.einsum("ij,bjhw->bihw", m, person), 0, 1).astype(np.float32)
        garments = [
            np.clip(np.einsum("ij,bjhw->bihw", m, g), 0, 1).astype(np.float32) for g in garments
        ]

    if rng.bernoulli(policy.op_probability):
        c = float(rng.uniform((), policy.contrast_lo, policy.contrast_hi))
        person = np.clip((person - 0.5) * c + 0.5, 0, 1).astype(np.float32)
        garments = [np.clip((g - 0.5) * c + 0.5, 0, 1).astype(np.float32) for g in garments]

    return TrainBatch(
        person=person, garments=garments, pose=pose, mask=mask, keypoints=kps, text_ids=batch.text_ids.copy()
    )
