"""Command-line entry point: ``airm {gen-data,train,refine,eval,ablate}``.

Exit status is 0 on success, 2 for usage or input errors and 3 when training
aborts on a non-finite loss. Every command that writes outputs also writes
the fully resolved settings next to them.
"""

import argparse
import logging
import os
import sys

import torch

from .datagen import CATEGORIES, MIN_SIZE, generate_dataset, load_png
from .errors import (CheckpointError, NumericalError, ParameterError, PerturbationError,
                     RasterIOError, ShapeError)
from .metrics import aggregate, evaluate, write_reports_csv, write_reports_jsonl

log = logging.getLogger("airm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _write_echo(path, lines):
    with open(path, "w") as fh:
        fh.write("".join(f"{k} = {v}\n" for k, v in lines))


def _load_config(path, overrides=()):
    from .trainer import TrainConfig
    text = ""
    if path:
        if not os.path.exists(path):
            raise UsageError(f"config file not found: {path}")
        with open(path) as fh:
            text = fh.read()
    text += "".join(f"{o}\n" for o in overrides)
    return TrainConfig.from_text(text)


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args):
    h, w = args.size
    if min(h, w) < MIN_SIZE:
        raise UsageError(f"--size {h}x{w} is below the {MIN_SIZE}x{MIN_SIZE} minimum")
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    cats = args.categories or list(CATEGORIES)
    unknown = set(cats) - set(CATEGORIES)
    if unknown:
        raise UsageError(f"unknown categories {sorted(unknown)}; valid: {', '.join(CATEGORIES)}")
    if len(args.iou_band) != 2:
        raise UsageError("--iou-band needs two numbers, lo,hi")
    lo, hi = args.iou_band
    seed = 0 if args.seed is None else args.seed
    os.makedirs(args.out, exist_ok=True)
    for k, split in enumerate(args.splits):
        generate_dataset(args.out, split, args.n, size=(h, w), seed=seed + 1000003 * k,
                         categories=cats, iou_range=(lo, hi), max_shapes=args.max_shapes,
                         workers=args.workers)
    _write_echo(os.path.join(args.out, "gen-data.cfg"), [
        ("n", args.n), ("size", f"{h}x{w}"), ("seed", seed), ("categories", ",".join(cats)),
        ("iou_band", f"{lo},{hi}"), ("max_shapes", args.max_shapes), ("splits", ",".join(args.splits))])
    print(f"wrote {args.n} scene(s) per split under {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .trainer import save_checkpoint, train
    cfg = _load_config(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.deterministic:
        cfg = cfg.replace(deterministic=True)
    if args.data and not os.path.isdir(os.path.join(args.data, "train")):
        raise UsageError(f"no train split under {args.data}")
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out + ".config.txt", "w") as fh:
        fh.write(cfg.to_text())
    log_path = args.log or args.out + ".log.csv"
    if os.path.exists(log_path):
        os.remove(log_path)
    ckpt = train(cfg, dataset_root=args.data, log_path=log_path, dump_dir=out_dir)
    save_checkpoint(ckpt, args.out)
    print(f"checkpoint written to {args.out} after {ckpt.iteration} iteration(s)")
    return EXIT_OK


def cmd_refine(args):
    from .inference import check_ratios, refine_batch
    from .trainer import load_checkpoint
    for p in (args.ckpt, args.manifest):
        if not os.path.exists(p):
            raise UsageError(f"file not found: {p}")
    ratios = check_ratios(args.ratios)
    if args.seed is not None:
        torch.manual_seed(args.seed)
    ckpt = load_checkpoint(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    _write_echo(os.path.join(args.out, "refine.cfg"), [
        ("ckpt", os.path.abspath(args.ckpt)), ("manifest", os.path.abspath(args.manifest)),
        ("ratios", ",".join(repr(r) for r in ratios))])
    agg = refine_batch(args.manifest, ckpt, args.out, ratios)
    print(f"refined into {args.out}: mean IoU {agg.iou:.4f}, mBA {agg.mba:.4f}, "
          f"{len(agg.errors)} error row(s)")
    return EXIT_OK


def _pair_masks(pred_dir, gt_dir):
    """(name, pred_path, gt_path-or-None) for every mask PNG under ``pred_dir``.

    When the matching folder under ``gt_dir`` holds a ``gt.png`` (the
    generated-dataset layout) that file is the ground truth; otherwise the
    prediction is matched to the same relative path. Input images are skipped.
    """
    pairs = []
    for root, _, files in sorted(os.walk(pred_dir)):
        for f in sorted(files):
            if not f.lower().endswith(".png") or f == "image.png":
                continue
            rel = os.path.relpath(os.path.join(root, f), pred_dir)
            cand = [os.path.join(gt_dir, os.path.dirname(rel), "gt.png"), os.path.join(gt_dir, rel)]
            gt = next((c for c in cand if os.path.exists(c)), None)
            name = os.path.dirname(rel) or os.path.splitext(rel)[0]
            pairs.append((name, os.path.join(pred_dir, rel), gt))
    return pairs


def cmd_eval(args):
    for d in (args.pred, args.gt):
        if not os.path.isdir(d):
            raise UsageError(f"directory not found: {d}")
    reports, errors = [], []
    for name, pred, gt in _pair_masks(args.pred, args.gt):
        if gt is None:
            errors.append((name, "error: no ground truth"))
            continue
        try:
            reports.append(evaluate(load_png(pred, channels=1), load_png(gt, channels=1),
                                    n_radii=args.radii, name=name))
        except (RasterIOError, ShapeError) as exc:
            errors.append((name, f"error: {exc}"))
    agg = aggregate(reports)
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    if args.report.endswith(".jsonl") or args.report.endswith(".json"):
        write_reports_jsonl(reports, args.report, agg)
    else:
        write_reports_csv(reports, args.report, agg, extra_rows=errors)
    print(f"{len(reports)} mask(s): mean IoU {agg.iou:.4f}, mBA {agg.mba:.4f}; "
          f"{len(errors)} unmatched or unreadable")
    return EXIT_OK


def cmd_ablate(args):
    from .experiments import STUDIES, ArmCache, run_study
    if args.study not in STUDIES:
        raise UsageError(f"unknown study {args.study!r}; valid studies: {', '.join(STUDIES)}")
    cfg = _load_config(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, f"{args.study}.config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    values = _names(args.values) if args.values else None
    out_csv = os.path.join(args.out, f"{args.study}.csv")
    rows = run_study(args.study, values, cfg, out=out_csv, cache=ArmCache(args.cache))
    for r in rows:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base random seed")
    common.add_argument("--workers", type=int, default=1,
                        help="processes for data generation (training data order is unaffected)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="airm", description="Coarse-mask refinement with adaptive "
                                "implicit decoders.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="synthesise a labelled dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=64, help="scenes per split")
    g.add_argument("--size", type=_size, default=(64, 64), help="HxW")
    g.add_argument("--categories", type=_names, default=None)
    g.add_argument("--iou-band", type=_floats, default=[0.8, 1.0])
    g.add_argument("--max-shapes", type=int, default=2)
    g.add_argument("--splits", type=_names, default=["train", "test"])
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a refinement model")
    t.add_argument("--config", default=None, help="key = value config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry (repeatable)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--data", default=None, help="dataset root with a train/ split; synthetic if omitted")
    t.add_argument("--log", default=None, help="CSV log path (default: <out>.log.csv)")
    t.add_argument("--deterministic", action="store_true",
                   help="single-threaded, deterministic kernels")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("refine", parents=[common], help="refine the coarse masks of a manifest")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--ratios", type=_floats, default=[0.125, 0.25, 0.5, 1.0])
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("eval", parents=[common], help="score predicted masks against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True, help=".csv or .jsonl")
    e.add_argument("--radii", type=int, default=5, help="number of boundary-band radii")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="run a desk-scale study")
    a.add_argument("--study", required=True, help="rf, category, radius, component, loss or embed")
    a.add_argument("--config", default=None)
    a.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--out", required=True)
    a.add_argument("--values", default=None, help="comma-separated study values")
    a.add_argument("--cache", default=None, help="arm cache root (default: $AIRM_CACHE_DIR)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("airm: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"airm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ParameterError, ShapeError, RasterIOError, CheckpointError,
            PerturbationError, FileNotFoundError) as exc:
        print(f"airm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
