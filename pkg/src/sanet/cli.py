"""``sanet`` command line: synthesize, prepare, train, generate, evaluate, gradcam.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from PIL import Image

from .config import ConfigError, RunConfig, load_run_config, parse_run_config
from .data import (DEFAULT_BLANK_THRESHOLD, DEFAULT_MASK_SUFFIX, DEFAULT_WHITE_LEVEL, DatasetManifest,
                   Domain, PipelineError, build_manifest, list_images, read_rgb, write_rgb)

log = logging.getLogger("sanet")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _echo(title: str, settings: dict) -> None:
    print(f"# {title}: {json.dumps(settings, sort_keys=True)}")


def _existing_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"no such directory: {p}")
    return p


def _existing_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p


def _load_mask_for(image_path: Path, shape):
    from .segmentation import load_mask
    sidecar = image_path.with_name(f"{image_path.stem}{DEFAULT_MASK_SUFFIX}.png")
    if sidecar.exists():
        return load_mask(sidecar, shape, image_path.stem).binary
    return None


# ---------------------------------------------------------------------------


def cmd_synthesize(args) -> int:
    from .fixtures import synthesize
    _echo("synthesize", {"out": str(args.out), "seed": args.seed, "n_frozen": args.n_frozen,
                         "n_permanent": args.n_permanent, "size": args.size})
    paths = synthesize(args.out, seed=args.seed, n_frozen=args.n_frozen,
                       n_permanent=args.n_permanent, size=args.size)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    from .segmentation import cache_masks
    frozen = [_existing_dir(d) for d in args.frozen]
    permanent = [_existing_dir(d) for d in args.permanent]
    out = Path(args.out)
    settings = {"frozen": [str(d) for d in frozen], "permanent": [str(d) for d in permanent],
                "out": str(out), "seed": args.seed, "patch_size": args.patch_size,
                "stride": args.stride or args.patch_size, "blank_threshold": args.blank_threshold,
                "white_level": args.white_level}
    _echo("prepare", settings)
    for domain, dirs in ((Domain.FROZEN, frozen), (Domain.PERMANENT, permanent)):
        manifest = build_manifest(dirs, domain, out / "patches" / domain.value, seed=args.seed,
                                  patch_size=args.patch_size, stride=args.stride,
                                  rho=args.blank_threshold, white_level=args.white_level)
        manifest = cache_masks(manifest)
        path = manifest.save(out / f"{domain.value}_manifest.txt")
        print(f"{domain.value}: kept {len(manifest)} patches, rejected {manifest.rejected_patches} blank, "
              f"skipped {manifest.skipped_files} unreadable files -> {path}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    if args.config:
        rc = load_run_config(_existing_file(args.config), toy=args.toy, validate=False)
    else:
        rc = parse_run_config({}, toy=args.toy)
    train_cfg = rc.train
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if args.device:
        train_cfg = dataclasses.replace(train_cfg, device=args.device)
    rc = dataclasses.replace(
        rc, train=train_cfg,
        frozen_manifest=args.frozen_manifest or rc.frozen_manifest,
        permanent_manifest=args.permanent_manifest or rc.permanent_manifest,
        output_dir=args.out or rc.output_dir)
    errors = train_cfg.validate()
    for key in ("frozen_manifest", "permanent_manifest"):
        if not getattr(rc, key):
            errors.append(f"data.{key}: required")
    if errors:
        raise ConfigError(errors)
    return rc


def cmd_train(args) -> int:
    from .training import load_checkpoint, train
    rc = _run_config(args)
    print(f"# config: {rc.dumps()}")
    frozen = DatasetManifest.load(_existing_file(rc.frozen_manifest))
    permanent = DatasetManifest.load(_existing_file(rc.permanent_manifest))
    resume = load_checkpoint(_existing_file(args.resume)) if args.resume else None

    def progress(report):
        if report.step % max(args.log_every, 1) == 0:
            print(report.log_line(), flush=True)

    cfg = resume.train_config if resume else rc.train
    result = train(frozen, permanent, cfg, out_dir=rc.output_dir, resume=resume, on_step=progress)
    final = [p for p in result.checkpoints if p.name == "final.ckpt"]
    print(f"final checkpoint: {final[-1] if final else 'not written'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .segmentation import Segmenter, apply_mask
    from .training import generate, load_checkpoint
    ckpt = load_checkpoint(_existing_file(args.checkpoint))
    inputs = _existing_dir(args.inputs)
    out = Path(args.out)
    _echo("generate", {"checkpoint": str(args.checkpoint), "inputs": str(inputs), "out": str(out),
                       "segmented": args.segmented})
    size = ckpt.bundle.gen_cfg.image_size
    errors: List[str] = []
    files = list_images(inputs)
    out.mkdir(parents=True, exist_ok=True)
    if args.segmented:
        (out / "segmented").mkdir(exist_ok=True)
    segmenter = Segmenter()
    written = 0
    for path in files:
        px = read_rgb(path)
        if px.shape != (size, size, 3):
            errors.append(f"{path.name}: size {px.shape[1]}x{px.shape[0]}, generator expects {size}x{size}")
            continue
        write_rgb(out / f"{path.stem}.png", generate(ckpt.bundle, px)[0])
        written += 1
        if args.segmented:
            mask = _load_mask_for(path, px.shape[:2])
            if mask is None:
                mask = segmenter(px).binary
            seg = apply_mask(px, mask).pixels
            write_rgb(out / "segmented" / f"{path.stem}.png", generate(ckpt.bundle, seg)[0])
    print(f"generated {written} of {len(files)} patches -> {out}")
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_FAILURE if errors else EXIT_OK


def _image_set(name, directory):
    from .evaluation.report import ImageSet
    paths = list_images(directory)
    images = [read_rgb(p) for p in paths]
    masks = [_load_mask_for(p, im.shape[:2]) for p, im in zip(paths, images)]
    return ImageSet(name, images, masks if masks and all(m is not None for m in masks) else None)


def cmd_evaluate(args) -> int:
    from .evaluation.fid import RandomConvFeatures, inception_extractor
    from .evaluation.report import evaluate_sets, write_histograms, write_metrics_csv
    from .segmentation import Segmenter
    real = _image_set("permanent", _existing_dir(args.real))
    generated = _image_set("generated", _existing_dir(args.generated))
    frozen = _image_set("frozen", _existing_dir(args.frozen)) if args.frozen else None
    out = Path(args.out)
    _echo("evaluate", {"real": str(args.real), "generated": str(args.generated),
                       "frozen": str(args.frozen) if args.frozen else None, "out": str(out),
                       "dataset": args.dataset, "extractor": args.extractor, "seed": args.seed})
    if args.extractor == "inception":
        extractor = inception_extractor(args.device or "cpu")
    else:
        extractor = RandomConvFeatures(seed=args.seed)
    methods = [frozen, generated] if frozen is not None else [generated]
    report = evaluate_sets(real, methods, extractor, Segmenter(), frozen=frozen, dataset=args.dataset)
    out.mkdir(parents=True, exist_ok=True)
    print(f"metrics: {write_metrics_csv(out / 'metrics.csv', report)}")
    for p in write_histograms(out, report.stats):
        print(f"histogram: {p}")
    for row in report.rows:
        print(f"{row['method']}: fid={row['fid']} js_average={row['js_average']}")
    return EXIT_OK


def cmd_gradcam(args) -> int:
    from .evaluation.gradcam import grad_cam, layer_names, overlay, to_gray8
    from .training import load_checkpoint, to_tensor
    ckpt = load_checkpoint(_existing_file(args.checkpoint))
    inputs = _existing_dir(args.inputs)
    d_p = ckpt.bundle.d_p
    valid = layer_names(d_p)
    if args.layer not in valid:
        raise UsageError(f"unknown layer {args.layer!r}; valid layers: {', '.join(valid)}")
    out = Path(args.out)
    _echo("gradcam", {"checkpoint": str(args.checkpoint), "inputs": str(inputs), "layer": args.layer,
                      "out": str(out)})
    out.mkdir(parents=True, exist_ok=True)
    dtype = next(d_p.parameters()).dtype
    count = 0
    for path in list_images(inputs):
        px = read_rgb(path)
        hm = grad_cam(d_p, to_tensor(px, dtype), args.layer)
        write_rgb(out / f"{path.stem}_overlay.png", overlay(px, hm))
        Image.fromarray(to_gray8(hm), mode="L").save(out / f"{path.stem}_cam.png")
        count += 1
    print(f"wrote {count} heatmaps -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sanet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="write a synthetic frozen/permanent fixture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-frozen", type=int, default=200)
    p.add_argument("--n-permanent", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("prepare", help="cut tiles into patches, filter blanks, cache masks, write manifests")
    p.add_argument("--frozen", nargs="+", required=True, help="frozen-section tile directories")
    p.add_argument("--permanent", nargs="+", required=True, help="permanent-section tile directories")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--blank-threshold", type=float, default=DEFAULT_BLANK_THRESHOLD)
    p.add_argument("--white-level", type=int, default=DEFAULT_WHITE_LEVEL)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model bundle")
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--toy", action="store_true", help="64x64 patches and small networks")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="run directory (overrides output.dir)")
    p.add_argument("--device", default=None)
    p.add_argument("--frozen-manifest", default=None)
    p.add_argument("--permanent-manifest", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="translate frozen patches with G_P")
    p.add_argument("checkpoint")
    p.add_argument("inputs", help="directory of frozen patches")
    p.add_argument("--out", required=True)
    p.add_argument("--segmented", action="store_true", help="also translate the nuclei-segmented inputs")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="FID, GLCM statistics, JS divergence and blank-region deviation")
    p.add_argument("--real", required=True, help="real permanent patches")
    p.add_argument("--generated", required=True)
    p.add_argument("--frozen", default=None, help="frozen inputs the generated set was translated from")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default="dataset")
    p.add_argument("--extractor", choices=("random", "inception"), default="random")
    p.add_argument("--seed", type=int, default=0, help="seed of the built-in feature extractor")
    p.add_argument("--device", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcam", help="Grad-CAM heatmaps of the permanent-domain discriminator")
    p.add_argument("checkpoint")
    p.add_argument("inputs")
    p.add_argument("--layer", default="layer4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcam)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PipelineError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
