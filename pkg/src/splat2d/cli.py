"""``splat2d`` command-line interface.

Exit codes: 0 success, 2 validation error (bad arguments, inputs or files),
3 numerical failure.  Reports go to ``<out>/<verb>.json``.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional, Sequence

from . import experiments as ex
from .errors import NumericalError, Splat2DError, ValidationError
from .imageio import load_image, save_image
from .metrics import psnr
from .pipeline import PipelineConfig, load_config, load_features, save_features
from .render import FeatureGrid

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
FEATURE_EXTS = (".s2df", ".feat")
GLOBAL_DEFAULTS = {"seed": 0, "config": None, "out": "splat2d_out", "threads": 1, "data": None}


def _floats(text: str) -> list[float]:
    try:
        out = []
        for part in text.split(","):
            part = part.strip()
            if "/" in part:
                num, den = part.split("/", 1)
                out.append(float(num) / float(den))
            elif part:
                out.append(float(part))
        return out
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def resolve(path: str) -> str:
    """Existing path as given, else relative to the dataset root (``$SPLAT2D_DATA``)."""
    if os.path.exists(path):
        return path
    candidate = os.path.join(ex.dataset_root(), path)
    if os.path.exists(candidate):
        return candidate
    raise ValidationError(f"input not found: {path} (also looked in {ex.dataset_root()})")


def _load_grid(path: str) -> FeatureGrid:
    return load_features(path) if path.lower().endswith(FEATURE_EXTS) else load_image(path)


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the verb; SUPPRESS keeps the
    # subparser from overwriting a value given before it with its default.
    common = argparse.ArgumentParser(add_help=False)
    sup = argparse.SUPPRESS
    common.add_argument("--seed", type=int, default=sup, help="random seed (default 0)")
    common.add_argument("--config", default=sup, help="pipeline config file of 'key = value' lines")
    common.add_argument("--out", default=sup, help="output directory (default ./splat2d_out)")
    common.add_argument("--threads", type=int, default=sup, help="worker threads for rendering (default 1)")
    common.add_argument("--data", default=sup, help="dataset root directory (overrides $SPLAT2D_DATA)")

    p = argparse.ArgumentParser(prog="splat2d", description="2D Gaussian splatting experiments", parents=[common])
    sub = p.add_subparsers(dest="verb", required=True)

    f = sub.add_parser("fit", parents=[common], help="single-image overfit or noisy-init study")
    f.add_argument("image", nargs="?", help="grayscale/RGB image (default: bundled camera crop)")
    f.add_argument("--study", choices=("overfit", "noisy"), default="overfit")
    f.add_argument("--steps", type=int, default=2000)
    f.add_argument("--lr", type=float, default=2e-3)
    f.add_argument("--fractions", type=_floats, default=[1 / 16, 1 / 4, 1.0], help="Gaussians-per-pixel sweep, e.g. 1/16,1/4,1")
    f.add_argument("--noise-levels", type=_floats, default=[0.1, 0.25, 0.5])
    f.add_argument("--draws", type=int, default=4)

    r = sub.add_parser("render", parents=[common], help="render an LR-initialized field at several scales")
    r.add_argument("image", nargs="?", help="LR image or feature file (default: bundled astronaut crop)")
    r.add_argument("--scales", type=_floats, default=[1.5, 2.4, 3.3, 3.6, 10.0])
    r.add_argument("--hr", help="HR reference for PSNR")
    r.add_argument("--fit-steps", type=int, default=0, help="fit the field to the input first")

    a = sub.add_parser("ablate", parents=[common], help="dual-stream / bank-size ablation")
    a.add_argument("images", nargs="*", help="HR images (default: bundled crops)")
    a.add_argument("--splits", type=_ints, default=[0, 8], help="channels_splat values")
    a.add_argument("--banks", type=_ints, default=None, help="bank sizes (default: config bank_size)")
    a.add_argument("--scale", type=int, default=2)
    a.add_argument("--steps", type=int, default=ex.ABLATION_STEPS)
    a.add_argument("--lr", type=float, default=ex.ABLATION_LR)
    a.add_argument("--workers", type=int, default=1, help="parallel processes over grid points")

    b = sub.add_parser("bank-hist", parents=[common], help="bank selection histogram after a pipeline fit")
    b.add_argument("images", nargs="*", help="HR images (default: bundled crops)")
    b.add_argument("--bank-size", type=int, default=None)
    b.add_argument("--scale", type=int, default=2)
    b.add_argument("--steps", type=int, default=ex.ABLATION_STEPS)
    b.add_argument("--lr", type=float, default=ex.ABLATION_LR)

    q = sub.add_parser("psnr", parents=[common], help="PSNR between two images")
    q.add_argument("a")
    q.add_argument("b")
    q.add_argument("--luma", action="store_true", help="compare BT.601 luma instead of RGB")
    q.add_argument("--max-val", type=float, default=1.0)

    s = sub.add_parser("synth-lr", parents=[common], help="bicubic LR synthesis")
    s.add_argument("images", nargs="+")
    s.add_argument("--scale", type=float, required=True)
    s.add_argument("--no-antialias", action="store_true", help="plain 4-tap kernel when shrinking")
    return p


def _pipeline_config(args) -> PipelineConfig:
    return load_config(resolve(args.config)) if args.config else PipelineConfig()


def _run(args) -> ex.ExperimentReport:
    out, threads = args.out, args.threads
    if threads < 1:
        raise ValidationError("--threads must be >= 1")
    if args.verb == "fit":
        image = resolve(args.image) if args.image else None
        if args.study == "overfit":
            return ex.run_overfit(image, args.steps, args.lr, args.fractions, out_dir=out, threads=threads)
        return ex.run_noisy_init(image, args.noise_levels, args.draws, args.steps, args.lr, seed=args.seed, out_dir=out, threads=threads)
    if args.verb == "render":
        grid = _load_grid(resolve(args.image)) if args.image else None
        hr = _load_grid(resolve(args.hr)) if args.hr else None
        return ex.run_scale_suite(grid, args.scales, hr, args.fit_steps, out_dir=out, threads=threads)
    if args.verb == "ablate":
        base = _pipeline_config(args)
        banks = args.banks or [base.bank_size]
        grid = [{"channels_splat": cs, "bank_size": k} for cs in args.splits for k in (banks if cs else banks[:1])]
        images = [resolve(p) for p in args.images] or None
        return ex.run_ablation(grid, images, base, args.scale, args.steps, args.lr, seed=args.seed, workers=args.workers,
                               out_dir=out, threads=threads)
    if args.verb == "bank-hist":
        base = _pipeline_config(args)
        images = [resolve(p) for p in args.images] or None
        return ex.run_bank_histogram(images, args.bank_size or base.bank_size, args.steps, args.lr, base, args.scale,
                                     args.seed, out_dir=out, threads=threads)
    if args.verb == "psnr":
        a, b = _load_grid(resolve(args.a)), _load_grid(resolve(args.b))
        value = psnr(a, b, args.max_val, luma=args.luma)
        print(f"PSNR {value:.4f} dB")
        row = {"a": os.path.basename(args.a), "b": os.path.basename(args.b), "psnr": value}
        return ex.ExperimentReport("psnr", {"luma": args.luma, "max_val": args.max_val}, [row], {"psnr": value})
    if args.verb == "synth-lr":
        rows, files = [], []
        os.makedirs(out, exist_ok=True)
        for path in args.images:
            src = resolve(path)
            lo = ex.synthesize_lr(_load_grid(src).data, args.scale, antialias=not args.no_antialias)
            stem, ext = os.path.splitext(os.path.basename(src))
            name = f"{stem}_x{args.scale:g}{ext if lo.shape[0] in (1, 3) else '.s2df'}"
            (save_image if lo.shape[0] in (1, 3) else save_features)(lo, os.path.join(out, name))
            files.append(name)
            rows.append({"input": os.path.basename(src), "output": name, "scale": args.scale, "height": lo.shape[1], "width": lo.shape[2]})
        params = {"scale": args.scale, "antialias": not args.no_antialias}
        return ex.ExperimentReport("synth_lr", params, rows, {"count": len(rows)}, files)
    raise ValidationError(f"unknown verb {args.verb}")  # pragma: no cover - argparse guards this


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    if args.data:
        os.environ["SPLAT2D_DATA"] = args.data
    try:
        with ex._Timer() as timer:
            report = _run(args)
        meta = ex._meta(timer, args.threads)
        meta.update(report.meta)
        meta["threads"] = args.threads
        report.meta = meta
        os.makedirs(args.out, exist_ok=True)
        report.params.setdefault("seed", args.seed)
        path = os.path.join(args.out, f"{args.verb}.json")
        report.write(path)
    except NumericalError as exc:
        print(f"splat2d: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (Splat2DError, OSError) as exc:
        print(f"splat2d: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"{args.verb}: wrote {path} (payload sha256 {report.payload_sha256()[:16]})")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
