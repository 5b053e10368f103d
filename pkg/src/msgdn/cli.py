"""Command-line front end: ``msgdn <verb> ...``.

Verbs run in pipeline order::

    prepare    images + codec -> manifest of (original, decoded, bits) pairs
    candidates manifest -> candidates CSV (PSNR per image and QP)
    allocate   candidates CSV + target bpp -> plan CSV
    train      plan file + manifest -> checkpoints, metrics.jsonl
    infer      checkpoint + image -> post-processed image
    evaluate   manifest + plan CSV [+ checkpoint] -> per-image CSV, RD table
    rd-plot    RD tables -> merged RD table + plot
"""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import CodecError, ConfigError, InfeasibleBudget, ShapeError, TrainingError

log = logging.getLogger("msgdn")

STUB_PREFIX = "stub:"


def _qps(text: str):
    try:
        qps = sorted({int(q) for q in text.split(",") if q.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"QP list must be comma-separated integers, got {text!r}")
    if not qps:
        raise argparse.ArgumentTypeError("empty QP list")
    return qps


def _codec(text: str):
    from .data import CodecSpec, stub_codec

    if text.startswith(STUB_PREFIX):
        return stub_codec(text[len(STUB_PREFIX):] or "dct")
    return CodecSpec.from_file(text)


def cmd_prepare(args) -> int:
    from .data import build_manifest

    m = build_manifest(args.images, args.qps, _codec(args.codec), args.out, workers=args.workers)
    print(f"{len(m.pairs)} pairs, {len(m.failures)} failures -> {args.out}")
    return 0


def cmd_candidates(args) -> int:
    from .data import DatasetManifest
    from .evaluation import candidates_from_manifest

    rows = candidates_from_manifest(DatasetManifest.load(args.manifest), args.out,
                                    checkpoint=args.checkpoint, y_only=args.y_only)
    print(f"{len(rows)} candidates -> {args.out}")
    return 0


def cmd_allocate(args) -> int:
    from .allocation import allocate, read_candidates, write_plan

    cands = read_candidates(args.candidates, quality_column=args.quality_column)
    plan = allocate(cands, args.target_bpp, budget_mode=args.budget_mode)
    write_plan(args.out, plan, cands)
    print(f"mean bpp {plan.mean_bpp:.6f} (target {args.target_bpp}), "
          f"mean quality {plan.mean_quality:.4f} dB -> {args.out}")
    return 0


def cmd_train(args) -> int:
    from .data import DatasetManifest
    from .training import TrainPlan, run

    ck = run(TrainPlan.from_file(args.plan), DatasetManifest.load(args.manifest), args.out, resume=args.resume)
    print(f"epoch {ck.epoch}, step {ck.global_step} -> {ck.path}")
    return 0


def cmd_infer(args) -> int:
    from .evaluation import infer

    infer(args.checkpoint, args.input, args.output, tile=args.tile)
    return 0


def cmd_evaluate(args) -> int:
    from .allocation import read_plan
    from .data import DatasetManifest
    from .evaluation import emit_rd, evaluate

    points, _ = evaluate(DatasetManifest.load(args.manifest), read_plan(args.plan), checkpoint=args.checkpoint,
                         out_csv=args.out, post_dir=args.post_dir, y_only=args.y_only, tile=args.tile)
    if args.rd:
        emit_rd(points, args.rd)
    for p in points:
        print(f"{p.label}: {p.bpp:.6f} bpp, {p.psnr_db:.4f} dB over {p.n_images} images")
    return 0


def cmd_rd_plot(args) -> int:
    from .evaluation import emit_rd, read_rd

    points = [p for path in args.inputs for p in read_rd(path)]
    emit_rd(points, args.out_csv, args.out_plot)
    print(f"{len(points)} points -> {args.out_csv}, {args.out_plot}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msgdn", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prepare", help="encode/decode images at each QP and write a manifest")
    p.add_argument("--images", required=True, help="directory of source images")
    p.add_argument("--qps", required=True, type=_qps, help="comma-separated, e.g. 37,38,39")
    p.add_argument("--codec", required=True,
                   help="codec config (.toml/.json) or stub:dct / stub:identity for the bundled stub")
    p.add_argument("--out", required=True, help="manifest path (.jsonl)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("candidates", help="tabulate bits and PSNR per image and QP")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="also score post-processed PSNR (quality_post_db)")
    p.add_argument("--y-only", action="store_true", help="PSNR on luma instead of RGB")
    p.set_defaults(func=cmd_candidates)

    p = sub.add_parser("allocate", help="pick one QP per image under a bpp budget")
    p.add_argument("--candidates", required=True)
    p.add_argument("--target-bpp", required=True, type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--budget-mode", choices=["mean", "pooled"], default="mean")
    p.add_argument("--quality-column", default="quality_db",
                   help="quality_db (codec PSNR) or quality_post_db (post-processed PSNR)")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("train", help="train the generator from a plan file")
    p.add_argument("--plan", required=True, help="training plan (.toml/.json)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="post-process one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tile", type=int, help="process in tiles of this size to bound memory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="PSNR/bpp of a plan, codec-only and post-processed")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plan", required=True, help="plan CSV from allocate")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True, help="per-image CSV")
    p.add_argument("--rd", help="RD table CSV for this operating point")
    p.add_argument("--post-dir", help="write post-processed images here")
    p.add_argument("--y-only", action="store_true")
    p.add_argument("--tile", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rd-plot", help="merge RD tables and plot one curve per label")
    p.add_argument("inputs", nargs="+", help="RD tables from evaluate --rd")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-plot", required=True)
    p.set_defaults(func=cmd_rd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ShapeError, CodecError, TrainingError, InfeasibleBudget, FileNotFoundError) as e:
        print(f"msgdn {args.verb}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
