"""Parsing-free agnostic masks from body keypoints.

The mask depends only on joint coordinates, never on garment pixels: a
dilated torso quadrilateral spanned by shoulders and hips, plus arm capsules
along shoulder-elbow-wrist. Training-time elongation stretches the mask
downward by a random factor; inference-time elongation stretches it to the
aspect ratio of the laid-out garment when that ratio exceeds the threshold.
"""

import json
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

JOINT_NAMES = (
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
)

_REQUIRED = ("l_shoulder", "r_shoulder", "l_hip", "r_hip")

TORSO_DILATE_FRAC = 0.15  # of shoulder width
ARM_RADIUS_FRAC = 0.08  # of image width
MASK_FILL = 0.5


class InsufficientPoseError(ValueError):
    """Required joints missing or zero-confidence."""


class PoseKeypoints:
    """Named 2-D body joints in pixel coordinates with per-joint confidence."""

    def __init__(self, joints):
        self.joints = {}
        for name, triple in joints.items():
            x, y, conf = (float(v) for v in triple)
            if not 0.0 <= conf <= 1.0:
                raise ValueError(f"confidence for {name} must be in [0,1], got {conf}")
            self.joints[name] = (x, y, conf)

    def present(self, name):
        return name in self.joints and self.joints[name][2] > 0.0

    def xy(self, name):
        x, y, _ = self.joints[name]
        return np.array([x, y], dtype=np.float64)

    def to_json(self):
        return {"joints": {k: list(v) for k, v in self.joints.items()}}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["joints"])


def load_keypoints(path):
    with open(path) as fh:
        return PoseKeypoints.from_json(json.load(fh))


def save_keypoints(path, kp):
    with open(path, "w") as fh:
        json.dump(kp.to_json(), fh, indent=1)


@dataclass
class ElongationPolicy:
    probability: float = 0.5
    factor_lo: float = 1.2
    factor_hi: float = 1.5
    infer_threshold: float = 1.2

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("elongation probability must be in [0,1]")
        if not self.factor_lo <= self.factor_hi:
            raise ValueError("factor range is inverted")


class AgnosticMask:
    """Binary (1,H,W) occlusion mask with a tight bounding box."""

    def __init__(self, mask):
        mask = np.ascontiguousarray(mask, dtype=np.float32)
        if mask.ndim == 2:
            mask = mask[None]
        if mask.ndim != 3 or mask.shape[0] != 1:
            raise ShapeError(f"mask must be (1,H,W), got {list(mask.shape)}")
        vals = np.unique(mask)
        if not np.isin(vals, [0.0, 1.0]).all():
            raise ShapeError("mask values must be binary {0,1}")
        self.mask = mask

    @property
    def shape(self):
        return self.mask.shape

    def is_empty(self):
        return not self.mask.any()

    def bbox(self):
        """Tight (top, left, bottom, right), inclusive."""
        m = self.mask[0]
        if not m.any():
            raise ValueError("bbox of empty mask")
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])

    def copy(self):
        return AgnosticMask(self.mask.copy())

    def contains(self, other):
        return bool((other.mask <= self.mask).all())


def _segment_dist2(px, py, a, b):
    """Squared distance to a segment; squared form keeps the threshold
    comparison exact in IEEE arithmetic (no libm rounding differences)."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    l2 = dx * dx + dy * dy
    if l2 == 0.0:
        return (px - ax) ** 2 + (py - ay) ** 2
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / l2, 0.0, 1.0)
    return (px - (ax + t * dx)) ** 2 + (py - (ay + t * dy)) ** 2


def _in_polygon(px, py, pts):
    inside = np.zeros(px.shape, dtype=bool)
    n = len(pts)
    for i in range(n):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        if y1 == y2:
            continue
        xint = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < xint)
    return inside


def build_agnostic_mask(kp, img_dims):
    """Mask from joints alone: dilated torso quad plus arm capsules.

    Requires both shoulders and both hips; arms contribute only where their
    joints are present.
    """
    h, w = img_dims
    missing = [name for name in _REQUIRED if not kp.present(name)]
    if missing:
        raise InsufficientPoseError(f"insufficient pose: missing {', '.join(missing)}")

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = xs, ys

    ls, rs = kp.xy("l_shoulder"), kp.xy("r_shoulder")
    lh_, rh_ = kp.xy("l_hip"), kp.xy("r_hip")
    shoulder_width = float(np.hypot(*(ls - rs)))
    dilate = TORSO_DILATE_FRAC * shoulder_width

    quad = [tuple(ls), tuple(rs), tuple(rh_), tuple(lh_)]
    region = _in_polygon(px, py, quad)
    for i in range(4):
        region |= _segment_dist2(px, py, quad[i], quad[(i + 1) % 4]) <= dilate * dilate

    arm_r2 = (ARM_RADIUS_FRAC * w) ** 2
    for side in ("l", "r"):
        chain = [f"{side}_shoulder", f"{side}_elbow", f"{side}_wrist"]
        for a, b in zip(chain, chain[1:]):
            if kp.present(a) and kp.present(b):
                region |= _segment_dist2(px, py, tuple(kp.xy(a)), tuple(kp.xy(b))) <= arm_r2

    return AgnosticMask(region.astype(np.float32)[None])


def _extend_down(mask2d, new_bottom):
    h = mask2d.shape[0]
    new_bottom = min(int(new_bottom), h - 1)
    col_any = mask2d.any(axis=0)
    lowest = (h - 1) - np.argmax(mask2d[::-1], axis=0)
    rows = np.arange(h)[:, None]
    add = col_any[None, :] & (rows > lowest[None, :]) & (rows <= new_bottom)
    return np.maximum(mask2d, add.astype(np.float32))


def elongate_train(m, rng, policy=None):
    """With probability P stretch the mask downward so its height becomes
    round(f * h) for f drawn uniformly from the policy range."""
    policy = policy or ElongationPolicy()
    if m.is_empty():
        raise ValueError("cannot elongate an empty mask")
    if not rng.bernoulli(policy.probability):
        return m.copy()
    u = float(rng.uniform())
    f = policy.factor_lo + u * (policy.factor_hi - policy.factor_lo)
    top, _, bottom, _ = m.bbox()
    height = bottom - top + 1
    new_bottom = top + int(round(f * height)) - 1
    return AgnosticMask(_extend_down(m.mask[0], new_bottom)[None])


def elongate_infer(m, garment_bbox):
    """Stretch the mask downward to the garment's aspect ratio when that
    ratio (height/width of the laid-out garment box) strictly exceeds the
    threshold; otherwise return the mask unchanged."""
    gw, gh = garment_bbox
    if gw <= 0 or gh <= 0:
        raise ValueError(f"degenerate garment bbox {garment_bbox}")
    sigma = gh / gw
    if sigma <= ElongationPolicy().infer_threshold:
        return m.copy()
    top, left, bottom, right = m.bbox()
    width = right - left + 1
    height = bottom - top + 1
    target_h = int(round(sigma * width))
    if target_h <= height:
        return m.copy()
    return AgnosticMask(_extend_down(m.mask[0], top + target_h - 1)[None])


def apply_mask(person, m):
    """Mid-gray out the masked region of a (3,H,W) or (b,3,H,W) image."""
    mask = m.mask if isinstance(m, AgnosticMask) else np.asarray(m, dtype=np.float32)
    if person.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(f"image dims {person.shape[-2:]} != mask dims {mask.shape[-2:]}")
    return np.where(mask > 0.5, np.float32(MASK_FILL), person).astype(np.float32)


def garment_bbox(img, tol=0.05):
    """(width, height) of the non-background region of a laid-out garment.

    Background is taken from the border's median color.
    """
    border = np.concatenate(
        [img[:, 0, :], img[:, -1, :], img[:, :, 0], img[:, :, -1]], axis=1
    )
    bg = np.median(border, axis=1)
    content = (np.abs(img - bg[:, None, None]) > tol).any(axis=0)
    if not content.any():
        raise ValueError("degenerate garment: no non-background pixels")
    rows = np.flatnonzero(content.any(axis=1))
    cols = np.flatnonzero(content.any(axis=0))
    return int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)
