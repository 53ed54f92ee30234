"""Residual weight synthesis over a three-model family and the discrete
greedy coefficient search.

merged = base + alpha*(inpaint - base) + beta*(specialist - base), computed
per tensor in float64 and stored as float32, so the alpha=0/beta=0 and
alpha=1/beta=0 collapse cases reproduce the source tensors bit for bit. The
first-layer kernel of the inpainting model may carry 5 extra input channels;
those slices are copied from it and scaled by alpha.

The search walks the delta grid over [0,2]^2 from (0.5, 0.5), moving to the
best strictly-improving 4-neighbor until none improves. Evaluators map a
WeightMap to a score with lower-is-better orientation; higher-is-better
scores (CLIP-like) must be negated to fit.
"""

import json
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .serialize import WeightMap


class MergeError(ValueError):
    pass


class EvaluatorError(RuntimeError):
    pass


@dataclass
class MergeCoefficients:
    alpha: float
    beta: float

    def __post_init__(self):
        for name, v in (("alpha", self.alpha), ("beta", self.beta)):
            if not 0.0 <= v <= 2.0:
                raise ValueError(f"{name}={v} outside [0,2]")


def merge(base, inp, ds, coeffs):
    """Per-tensor residual synthesis; see module docstring for the rule."""
    names_b, names_i, names_d = set(base.names()), set(inp.names()), set(ds.names())
    if not (names_b == names_i == names_d):
        odd = sorted((names_b ^ names_i) | (names_b ^ names_d))
        raise MergeError(f"name sets differ on entries: {odd[:5]}")
    a, b_ = float(coeffs.alpha), float(coeffs.beta)
    out = WeightMap(provenance="merged")
    for name in base.names():
        wb = base[name].astype(np.float64)
        wi = inp[name].astype(np.float64)
        wd = ds[name].astype(np.float64)
        if wd.shape != wb.shape:
            raise MergeError(f"shape mismatch for '{name}': ds {wd.shape} vs base {wb.shape}")
        if wi.shape == wb.shape:
            merged = wb + a * (wi - wb) + b_ * (wd - wb)
        elif (
            wi.ndim == 4
            and wb.ndim == 4
            and wi.shape[1] == wb.shape[1] + 5
            and wi.shape[0] == wb.shape[0]
            and wi.shape[2:] == wb.shape[2:]
        ):
            cin = wb.shape[1]
            core = wb + a * (wi[:, :cin] - wb) + b_ * (wd - wb)
            extra = a * wi[:, cin:]
            merged = np.concatenate([core, extra], axis=1)
        else:
            raise MergeError(
                f"shape mismatch for '{name}' beyond the extra-input-channel rule: "
                f"inp {wi.shape} vs base {wb.shape}"
            )
        out[name] = merged.astype(np.float32)
    return out


def _grid_coord(i, delta):
    return i * delta


def _max_index(delta):
    return int(np.floor(2.0 / delta + 1e-9))


def greedy_search(ev, base, inp, ds, delta):
    """4-neighbor descent on the delta grid from (0.5, 0.5).

    Returns (MergeCoefficients, trajectory); the trajectory lists every
    accepted point with its score, strictly decreasing. Neighbor order is
    +delta/-delta on alpha then +delta/-delta on beta; ties take the first.
    Grid coordinates are held as integer indices so 0.1 steps cannot drift.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    imax = _max_index(delta)
    memo = {}

    def f(ia, ib):
        if (ia, ib) not in memo:
            coeffs = MergeCoefficients(_grid_coord(ia, delta), _grid_coord(ib, delta))
            try:
                memo[(ia, ib)] = float(ev(merge(base, inp, ds, coeffs)))
            except Exception as e:
                raise EvaluatorError(
                    f"evaluator failed at (alpha, beta) = ({coeffs.alpha}, {coeffs.beta}): {e}"
                ) from e
        return memo[(ia, ib)]

    ia, ib = round(0.5 / delta), round(0.5 / delta)
    trajectory = [
        {"alpha": _grid_coord(ia, delta), "beta": _grid_coord(ib, delta), "score": f(ia, ib)}
    ]
    while True:
        current = f(ia, ib)
        neighbors = [(ia + 1, ib), (ia - 1, ib), (ia, ib + 1), (ia, ib - 1)]
        neighbors = [(x, y) for x, y in neighbors if 0 <= x <= imax and 0 <= y <= imax]
        scores = [f(x, y) for x, y in neighbors]
        if min(scores) >= current:
            break
        ia, ib = neighbors[int(np.argmin(scores))]
        trajectory.append(
            {"alpha": _grid_coord(ia, delta), "beta": _grid_coord(ib, delta), "score": min(scores)}
        )
    return MergeCoefficients(_grid_coord(ia, delta), _grid_coord(ib, delta)), trajectory


def grid_oracle(ev, base, inp, ds, delta):
    """Exhaustive argmin over the full grid; lexicographic tie-break.

    The check against greedy_search documents where the greedy walk's
    convexity assumption holds and where it does not.
    """
    n = 2.0 / delta
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"delta={delta} does not divide 2 evenly")
    imax = int(round(n))
    best = None
    best_score = None
    for ia in range(imax + 1):
        for ib in range(imax + 1):
            coeffs = MergeCoefficients(_grid_coord(ia, delta), _grid_coord(ib, delta))
            score = float(ev(merge(base, inp, ds, coeffs)))
            if best_score is None or score < best_score:
                best, best_score = coeffs, score
    return best, best_score


# -- evaluators ----------------------------------------------------------


def probe_family():
    """A coefficient-revealing family: merging it yields weights that store
    (alpha, beta) directly, so scalar test functions ride the real path."""
    base = WeightMap({"probe.alpha": np.zeros(1), "probe.beta": np.zeros(1)}, provenance="base")
    inp = WeightMap({"probe.alpha": np.ones(1), "probe.beta": np.zeros(1)}, provenance="inp")
    ds = WeightMap({"probe.alpha": np.zeros(1), "probe.beta": np.ones(1)}, provenance="ds")
    return base, inp, ds


def _probe_coords(wm):
    if "probe.alpha" not in wm or "probe.beta" not in wm:
        raise EvaluatorError("this evaluator needs the coefficient-probe family")
    return float(wm["probe.alpha"][0]), float(wm["probe.beta"][0])


class QuadraticEvaluator:
    """Convex bowl centered at (1.0, 1.1) by default."""

    def __init__(self, center=(1.0, 1.1), scale=(1.0, 1.0)):
        self.center = center
        self.scale = scale

    def __call__(self, wm):
        a, b = _probe_coords(wm)
        return self.scale[0] * (a - self.center[0]) ** 2 + self.scale[1] * (b - self.center[1]) ** 2


class PlaneEvaluator:
    """Monotone plane alpha + beta; minimized at the (0,0) corner."""

    def __call__(self, wm):
        a, b = _probe_coords(wm)
        return a + b


class FileEvaluator:
    """Grid scores from a JSON file: {"delta": d, "values": [[...], ...]}
    indexed as values[alpha_index][beta_index] over the probe family."""

    def __init__(self, path):
        with open(path) as fh:
            spec = json.load(fh)
        self.delta = float(spec["delta"])
        self.values = spec["values"]

    def __call__(self, wm):
        a, b = _probe_coords(wm)
        ia, ib = round(a / self.delta), round(b / self.delta)
        return float(self.values[ia][ib])


# -- CLIP-score stand-in ------------------------------------------------

N_EVAL_PAIRS = 20
_FEATURE_DIM = 18
_EMBED_DIM = 8


def _image_stats(img):
    img = np.asarray(img, dtype=np.float64)
    feats = [img.mean(axis=(1, 2)), img.std(axis=(1, 2))]
    h, w = img.shape[1], img.shape[2]
    for qy in range(2):
        for qx in range(2):
            patch = img[:, qy * h // 2 : (qy + 1) * h // 2, qx * w // 2 : (qx + 1) * w // 2]
            feats.append(patch.mean(axis=(1, 2)))
    return np.concatenate(feats)


def _projection():
    return Rng(0x51A7).normal((_FEATURE_DIM, _EMBED_DIM)).astype(np.float64)


def clip_score_stub(images, texts):
    """Deterministic image/text agreement surrogate, sign-flipped so that
    lower is better. Real cross-modal scoring is out of reach here; this
    keeps the search loop honest about orientation and determinism."""
    if len(images) != N_EVAL_PAIRS or len(texts) != N_EVAL_PAIRS:
        raise ValueError(f"need exactly {N_EVAL_PAIRS} image-text pairs")
    proj = _projection()
    sims = []
    for img, txt in zip(images, texts):
        u = _image_stats(img) @ proj
        t = np.asarray(txt, dtype=np.float64)
        nu, nt = np.linalg.norm(u), np.linalg.norm(t)
        sims.append(0.0 if nu < 1e-12 or nt < 1e-12 else float(u @ t / (nu * nt)))
    return -float(np.mean(sims))


def fixed_eval_pairs():
    """The 20 fixed synthetic image-text pairs; texts are built from the
    images' own projected stats plus small noise, so matched pairs score
    strictly better than shuffled ones by construction."""
    from .dataset import render_sample

    rng = Rng(0xF1DE)
    proj = _projection()
    images, texts = [], []
    for i in range(N_EVAL_PAIRS):
        sample = render_sample(rng.child(i), latent_hw=(8, 6), n_garments=1)
        img = sample.garments[0][0]
        u = _image_stats(img) @ proj
        u = u / np.linalg.norm(u)
        noise = rng.child(1000 + i).normal((_EMBED_DIM,)).astype(np.float64) * 0.05
        texts.append((u + noise).astype(np.float32))
        images.append(img)
    return images, texts


class ClipStubEvaluator:
    """Scores a try-on checkpoint: single-step samples on 20 fixed
    conditionings (sized to the checkpoint), decoded and scored against the
    fixed text embeddings."""

    def __init__(self, seed=0xE7A1):
        self.seed = seed
        self._batches = {}
        _, self._texts = fixed_eval_pairs()

    def _batch_for(self, latent_hw, n_garments):
        from .dataset import collate, synth_dataset

        key = (latent_hw, n_garments)
        if key not in self._batches:
            samples = synth_dataset(
                N_EVAL_PAIRS, Rng(self.seed), latent_hw=latent_hw, n_garments=n_garments
            )
            self._batches[key] = collate(samples)
        return self._batches[key]

    def __call__(self, wm):
        from .diffusion import DDIMSchedule, SampleInputs, ddim_sample
        from .maskgen import apply_mask
        from .unet import TryOnModel, mask_to_latent

        model = TryOnModel.from_weightmap(wm)
        batch = self._batch_for(model.cfg.latent_hw, model.cfg.n_conditions)
        codec = model.codec
        inputs = SampleInputs(
            agnostic_latent=codec.encode(apply_mask(batch.person, batch.mask)),
            mask_latent=mask_to_latent(batch.mask),
            garment_latents=[codec.encode(g) for g in batch.garments],
            pose_img=batch.pose,
            text_ids=batch.text_ids,
        )
        _, imgs = ddim_sample(model, inputs, DDIMSchedule(), steps=1, s_g=1.0, rng=Rng(self.seed))
        return clip_score_stub([imgs[i] for i in range(len(imgs))], self._texts)
