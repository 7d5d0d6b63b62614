"""Coarse-to-fine refinement over a schedule of resolution ratios."""

import logging
import os

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .airmf import decode_grid
from .datagen import load_png, save_png, to_uint8
from .errors import ParameterError, RasterIOError, ShapeError
from .metrics import aggregate, evaluate, write_reports_csv, write_reports_jsonl

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.125, 0.25, 0.5, 1.0)


def _as_model(ckpt):
    if isinstance(ckpt, nn.Module):
        return ckpt.eval()
    return ckpt.build_model()


def check_ratios(ratios):
    ratios = [float(r) for r in ratios]
    if not ratios or ratios[-1] != 1.0:
        raise ParameterError(f"ratio schedule must end at 1.0, got {ratios}")
    if any(b <= a for a, b in zip(ratios, ratios[1:])) or ratios[0] <= 0:
        raise ParameterError(f"ratios must be positive and strictly increasing, got {ratios}")
    return ratios


def stage_sizes(shape, ratios, stride):
    """Encoder input size for each stage, rounded to the stride; too-small stages are dropped."""
    H, W = shape
    sizes = []
    for r in ratios:
        h = int(round(r * H / stride)) * stride
        w = int(round(r * W / stride)) * stride
        if h < 2 * stride or w < 2 * stride:
            log.warning("ratio %g gives a %dx%d input below the %dpx minimum; stage skipped",
                        r, round(r * H), round(r * W), 2 * stride)
            continue
        sizes.append((h, w))
    if not sizes:
        raise ShapeError(f"image {H}x{W} too small for any refinement stage")
    return sizes


def _resize(t, size):
    if tuple(t.shape[-2:]) == tuple(size):
        return t
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=True)


@torch.no_grad()
def refine(image, coarse, ckpt, ratios=DEFAULT_RATIOS):
    """Refine ``coarse`` for ``image``; returns an (H, W, 1) soft mask.

    Each stage encodes the image and the current mask at its own scale and
    decodes straight to the next stage's resolution (the full resolution for
    the last stage); that output is the next stage's coarse mask.
    """
    model = _as_model(ckpt)
    ratios = check_ratios(ratios)
    image = np.asarray(image, dtype=np.float32)
    coarse = np.asarray(coarse, dtype=np.float32)
    if coarse.ndim == 3:
        coarse = coarse[..., 0]
    H, W = image.shape[:2]
    if coarse.shape != (H, W):
        raise ShapeError(f"image {H}x{W} and coarse mask {coarse.shape} differ in size")
    dtype = next(model.parameters()).dtype
    img_t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].to(dtype)
    cur = torch.from_numpy(coarse)[None, None].to(dtype)

    sizes = stage_sizes((H, W), ratios, model.stride)
    for k, size in enumerate(sizes):
        x = torch.cat([_resize(img_t, size), _resize(cur, size).clamp(0, 1)], dim=1)
        feat, _ = model.encode(x)
        params = model.mapping_params(feat)
        out_res = sizes[k + 1] if k + 1 < len(sizes) else (H, W)
        cur = decode_grid(feat, params, out_res)[:, None]
    return cur[0].permute(1, 2, 0).cpu().numpy().astype(np.float32)


def read_manifest(path):
    """Rows of (image, coarse, gt-or-None) paths, resolved against the manifest's folder."""
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ParameterError(f"manifest row needs image<TAB>coarse[<TAB>gt]: {line!r}")
            paths = [p if os.path.isabs(p) else os.path.join(base, p) for p in parts[:3]]
            rows.append((paths[0], paths[1], paths[2] if len(paths) > 2 else None, parts[1]))
    return rows


def refine_batch(manifest_path, ckpt, out_dir, ratios=DEFAULT_RATIOS):
    """Refine every manifest row, write PNGs and reports; returns the aggregate EvalReport.

    A row that fails (missing or corrupt file) becomes an error row; the
    others still run. Outputs mirror the coarse-mask paths under ``out_dir``.
    """
    model = _as_model(ckpt)
    os.makedirs(out_dir, exist_ok=True)
    reports, errors = [], []
    for image_path, coarse_path, gt_path, rel in read_manifest(manifest_path):
        name = os.path.dirname(rel) or os.path.splitext(os.path.basename(rel))[0]
        try:
            image = load_png(image_path, channels=3)
            coarse = load_png(coarse_path, channels=1)
            refined = refine(image, coarse, model, ratios)
            target = os.path.join(out_dir, rel)
            os.makedirs(os.path.dirname(target), exist_ok=True)
            save_png(refined, target)
            if gt_path is not None:
                # score the stored 8-bit mask so this agrees with `airm eval` on the PNGs
                written = to_uint8(refined) / 255.0
                reports.append(evaluate(written, load_png(gt_path, channels=1), name=name))
        except (RasterIOError, ShapeError) as exc:
            log.error("row %s failed: %s", name, exc)
            errors.append((name, f"error: {exc}"))
    agg = aggregate(reports)
    write_reports_jsonl(reports, os.path.join(out_dir, "reports.jsonl"), agg)
    write_reports_csv(reports, os.path.join(out_dir, "aggregate.csv"), agg, extra_rows=errors)
    agg.errors = errors
    return agg


def evaluate_samples(ckpt, samples, ratios=(1.0,)):
    """Score ``refine`` on (image, gt, coarse) triples; returns (coarse_reports, refined_reports)."""
    model = _as_model(ckpt)
    before, after = [], []
    for k, (image, gt, coarse) in enumerate(samples):
        before.append(evaluate(coarse, gt, name=str(k)))
        after.append(evaluate(refine(image, coarse, model, ratios), gt, name=str(k)))
    return before, after
