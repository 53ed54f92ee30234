"""Single CLI driving every subsystem.

Exit codes: 0 success, 1 invariant violation during computation, 2 user or
input error. Randomized subcommands require an explicit --seed; every run
writes a manifest.json into --outdir echoing the resolved config and the
sha256 of each output, and takes an exclusive lock on the directory.
"""

import argparse
import contextlib
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evolution, imageio, kernels, maskgen, metrics
from .dataset import load_dataset, save_dataset, synth_dataset
from .diffusion import DDIMSchedule, SampleInputs, ddim_sample
from .evolution import MergeCoefficients, greedy_search, merge
from .maskgen import (
    AgnosticMask,
    ElongationPolicy,
    InsufficientPoseError,
    apply_mask,
    build_agnostic_mask,
    elongate_infer,
    elongate_train,
    garment_bbox,
    load_keypoints,
)
from .rng import Rng
from .serialize import FormatError, WeightMap
from .tensor import NumericsError, ShapeError
from .training import TrainingError, train_toy
from .unet import TryOnModel, TryOnConfig, mask_to_latent

USER_ERRORS = (
    FileNotFoundError,
    IsADirectoryError,
    FormatError,
    InsufficientPoseError,
    ValueError,
    ShapeError,
)
INVARIANT_ERRORS = (NumericsError, TrainingError, evolution.EvaluatorError)


class LockError(RuntimeError):
    pass


@contextlib.contextmanager
def output_lock(outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    lock = outdir / ".hydravton.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"output dir {outdir} is locked by another run ({lock})")
    try:
        os.close(fd)
        yield outdir
    finally:
        lock.unlink(missing_ok=True)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(outdir, args, outputs, extra=None):
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()}
    config["kernel_backend"] = kernels.active_backend()
    manifest = {
        "config": config,
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    path = Path(outdir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _load_weightmap(path, provenance="base"):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"weight file not found: {p}")
    return WeightMap.load(p, provenance=provenance)


def _read_image(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"image not found: {p}")
    return imageio.read_ppm(p)


# -- subcommands ---------------------------------------------------------


def cmd_merge(args):
    base = _load_weightmap(args.base, "base")
    inp = _load_weightmap(args.inp, "inp")
    ds = _load_weightmap(args.ds, "ds")
    merged = merge(base, inp, ds, MergeCoefficients(args.alpha, args.beta))
    with output_lock(args.outdir) as outdir:
        out = outdir / args.out
        merged.save(out)
        write_manifest(outdir, args, [out])
    return 0


def _make_evaluator(args):
    if args.evaluator == "quadratic":
        return evolution.QuadraticEvaluator()
    if args.evaluator == "plane":
        return evolution.PlaneEvaluator()
    if args.evaluator == "clipstub":
        return evolution.ClipStubEvaluator()
    if args.evaluator == "file":
        if not args.evaluator_file:
            raise ValueError("--evaluator file requires --evaluator-file")
        return evolution.FileEvaluator(args.evaluator_file)
    raise ValueError(f"unknown evaluator {args.evaluator}")


def cmd_search(args):
    if args.base or args.inp or args.ds:
        if not (args.base and args.inp and args.ds):
            raise ValueError("--base/--inp/--ds must be given together")
        family = (
            _load_weightmap(args.base, "base"),
            _load_weightmap(args.inp, "inp"),
            _load_weightmap(args.ds, "ds"),
        )
    elif args.evaluator == "clipstub":
        raise ValueError("clipstub evaluator needs model checkpoints via --base/--inp/--ds")
    else:
        family = evolution.probe_family()
    ev = _make_evaluator(args)
    coeffs, trajectory = greedy_search(ev, *family, delta=args.delta)
    with output_lock(args.outdir) as outdir:
        out = outdir / "trajectory.json"
        out.write_text(
            json.dumps(
                {
                    "delta": args.delta,
                    "result": {"alpha": coeffs.alpha, "beta": coeffs.beta},
                    "trajectory": trajectory,
                },
                indent=1,
            )
        )
        write_manifest(outdir, args, [out])
    print(f"optimum (alpha, beta) = ({coeffs.alpha}, {coeffs.beta})")
    return 0


def _load_mask(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"mask not found: {p}")
    return AgnosticMask(imageio.read_pgm(p))


def cmd_mask(args):
    with output_lock(args.outdir) as outdir:
        if args.action == "build":
            kp_path = Path(args.keypoints)
            if not kp_path.exists():
                raise FileNotFoundError(f"keypoints not found: {kp_path}")
            mask = build_agnostic_mask(load_keypoints(kp_path), (args.height, args.width))
            out = outdir / "mask.pgm"
        elif args.action == "augment":
            mask = elongate_train(
                _load_mask(args.mask), Rng(args.seed), ElongationPolicy(probability=args.probability)
            )
            out = outdir / "mask_augmented.pgm"
        else:  # adapt
            if args.garment:
                g = _read_image(args.garment)
                box = garment_bbox(g)
            else:
                if not (args.garment_width and args.garment_height):
                    raise ValueError("adapt needs --garment or --garment-width/--garment-height")
                box = (args.garment_width, args.garment_height)
            mask = elongate_infer(_load_mask(args.mask), box)
            out = outdir / "mask_adapted.pgm"
        imageio.write_pgm(out, mask.mask)
        write_manifest(outdir, args, [out], extra={"bbox": list(mask.bbox())})
    return 0


def cmd_synth(args):
    samples = synth_dataset(
        args.n, Rng(args.seed), latent_hw=tuple(args.latent_hw), n_garments=args.garments
    )
    with output_lock(args.outdir) as outdir:
        files = save_dataset(outdir, samples)
        write_manifest(outdir, args, files)
    return 0


def cmd_train(args):
    dataset = load_dataset(args.data)
    first = dataset[0]
    lh = first.person.shape[2] // 8
    lw = first.person.shape[3] // 8
    cfg = TryOnConfig(n_conditions=len(first.garments), latent_hw=(lh, lw))
    model = TryOnModel(cfg, seed=args.seed)
    rows = []
    curve, ckpt = train_toy(
        model,
        dataset,
        args.steps,
        Rng(args.seed).child(1),
        lr=args.lr,
        batch_size=args.batch,
        dropout_p=args.dropout,
        log_fn=lambda step, loss, lr: rows.append(f"{step},{loss:.6f},{lr}"),
    )
    with output_lock(args.outdir) as outdir:
        ckpt_path = outdir / "checkpoint.hvw"
        ckpt.save(ckpt_path)
        loss_path = outdir / "loss.csv"
        loss_path.write_text("step,loss,lr\n" + "\n".join(rows) + "\n")
        write_manifest(
            outdir, args, [ckpt_path, loss_path], extra={"final_loss": curve[-1], "initial_loss": curve[0]}
        )
    return 0


def cmd_tryon(args):
    model = TryOnModel.from_weightmap(_load_weightmap(args.checkpoint))
    person = _read_image(args.person)
    H, W = model.cfg.image_hw
    if person.shape[1:] != (H, W):
        raise ValueError(
            f"person image is {person.shape[1]}x{person.shape[2]}, checkpoint expects {H}x{W}"
        )
    kp_path = Path(args.keypoints)
    if not kp_path.exists():
        raise FileNotFoundError(f"keypoints not found: {kp_path}")
    kp = load_keypoints(kp_path)
    garments = [_read_image(g) for g in args.garments]
    if len(garments) != model.cfg.n_conditions:
        raise ValueError(
            f"{len(garments)} garments given, checkpoint has {model.cfg.n_conditions} branches"
        )
    pose = _read_image(args.pose)
    if pose.shape[1:] != (2 * H, 2 * W):
        raise ValueError(f"pose rendering must be {2 * H}x{2 * W}, got {pose.shape[1:]}")

    mask = build_agnostic_mask(kp, (H, W))
    boxes = [garment_bbox(g) for g in garments]
    longest = max(boxes, key=lambda b: b[1] / b[0])
    mask = elongate_infer(mask, longest)

    codec = model.codec
    agn = apply_mask(person[None], mask.mask[None])
    inputs = SampleInputs(
        agnostic_latent=codec.encode(agn),
        mask_latent=mask_to_latent(mask.mask[None]),
        garment_latents=[codec.encode(g[None]) for g in garments],
        pose_img=pose[None],
        text_ids=np.array([args.text_slot], dtype=np.int64),
    )
    latent, img = ddim_sample(
        model, inputs, DDIMSchedule(), steps=args.steps, s_g=args.sg, rng=Rng(args.seed)
    )
    with output_lock(args.outdir) as outdir:
        result = outdir / "result.ppm"
        imageio.write_ppm(result, np.clip(img[0], 0, 1))
        mask_out = outdir / "mask.pgm"
        imageio.write_pgm(mask_out, mask.mask)
        latent_hash = hashlib.sha256(latent.tobytes()).hexdigest()
        write_manifest(
            outdir,
            args,
            [result, mask_out],
            extra={"latent_sha256": latent_hash, "hydra_forwards": model.hydra_forward_count},
        )
    return 0


def cmd_metrics(args):
    pairs = []
    for spec in args.pairs:
        try:
            a, b = spec.split(":")
        except ValueError:
            raise ValueError(f"pair spec '{spec}' must be path_a:path_b")
        pairs.append((_read_image(a), _read_image(b)))
    report = metrics.metrics_report(
        pairs, config={k: v for k, v in vars(args).items() if k not in ("func",)}
    )
    with output_lock(args.outdir) as outdir:
        out = outdir / "report.json"
        out.write_text(json.dumps(report.to_json(), indent=1))
        write_manifest(outdir, args, [out])
    print(f"ssim mean {report.mean:.4f} +/- {report.std:.4f} over {len(pairs)} pairs")
    return 0


# -- parser --------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="hydravton", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("merge", help="residual-merge three weight files")
    m.add_argument("--base", required=True)
    m.add_argument("--inp", required=True)
    m.add_argument("--ds", required=True)
    m.add_argument("--alpha", type=float, required=True)
    m.add_argument("--beta", type=float, required=True)
    m.add_argument("--out", default="merged.hvw")
    m.add_argument("--outdir", required=True)
    m.set_defaults(func=cmd_merge)

    s = sub.add_parser("search", help="greedy coefficient search on the merge grid")
    s.add_argument("--delta", type=float, default=0.1)
    s.add_argument(
        "--evaluator", choices=["quadratic", "plane", "clipstub", "file"], default="quadratic"
    )
    s.add_argument("--evaluator-file")
    s.add_argument("--base")
    s.add_argument("--inp")
    s.add_argument("--ds")
    s.add_argument("--outdir", required=True)
    s.set_defaults(func=cmd_search)

    k = sub.add_parser("mask", help="build/augment/adapt agnostic masks")
    k.add_argument("action", choices=["build", "augment", "adapt"])
    k.add_argument("--keypoints")
    k.add_argument("--width", type=int)
    k.add_argument("--height", type=int)
    k.add_argument("--mask")
    k.add_argument("--seed", type=int)
    k.add_argument("--probability", type=float, default=0.5)
    k.add_argument("--garment")
    k.add_argument("--garment-width", type=int)
    k.add_argument("--garment-height", type=int)
    k.add_argument("--outdir", required=True)
    k.set_defaults(func=cmd_mask)

    y = sub.add_parser("synth", help="generate a synthetic paired dataset")
    y.add_argument("--n", type=int, required=True)
    y.add_argument("--seed", type=int, required=True)
    y.add_argument("--garments", type=int, default=1)
    y.add_argument("--latent-hw", type=int, nargs=2, default=[8, 6])
    y.add_argument("--outdir", required=True)
    y.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the toy model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--lr", type=float, default=5e-5)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--dropout", type=float, default=0.1)
    t.add_argument("--outdir", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("tryon", help="end-to-end try-on from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--person", required=True)
    r.add_argument("--keypoints", required=True)
    r.add_argument("--pose", required=True)
    r.add_argument("--garments", nargs="+", required=True)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--steps", type=int, default=30)
    r.add_argument("--sg", type=float, default=1.3)
    r.add_argument("--text-slot", type=int, default=0)
    r.add_argument("--outdir", required=True)
    r.set_defaults(func=cmd_tryon)

    x = sub.add_parser("metrics", help="SSIM report over image pairs")
    x.add_argument("--pairs", nargs="+", required=True, metavar="A:B")
    x.add_argument("--outdir", required=True)
    x.set_defaults(func=cmd_metrics)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "mask" and args.action == "augment" and args.seed is None:
        parser.error("mask augment requires --seed")
    if args.command == "mask" and args.action == "build" and not (
        args.keypoints and args.width and args.height
    ):
        parser.error("mask build requires --keypoints, --width and --height")
    try:
        return args.func(args)
    except LockError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except INVARIANT_ERRORS as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
