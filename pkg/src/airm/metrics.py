"""IoU and mean boundary accuracy (mBA) for binary masks."""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError

THRESHOLD = 0.5


def _as_bool(mask):
    mask = np.asarray(mask)
    if mask.ndim == 3 and mask.shape[-1] == 1:
        mask = mask[..., 0]
    if mask.dtype == bool:
        return mask
    return mask > THRESHOLD


def _check_pair(pred, gt):
    pred, gt = _as_bool(pred), _as_bool(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def binarize(mask, threshold=THRESHOLD):
    """Soft mask -> bool mask (drops a trailing singleton channel)."""
    mask = np.asarray(mask)
    if mask.ndim == 3 and mask.shape[-1] == 1:
        mask = mask[..., 0]
    return mask > threshold


def iou(pred, gt):
    """|pred & gt| / |pred | gt|; two empty masks score 1.0."""
    pred, gt = _check_pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_pixels(mask):
    """Pixels with at least one 4-neighbour of the other label."""
    m = _as_bool(mask)
    edge = np.zeros_like(m)
    dv = m[1:, :] != m[:-1, :]
    dh = m[:, 1:] != m[:, :-1]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return edge


def boundary_band(mask, radius_px):
    """Pixels within Chebyshev distance ``radius_px`` of the mask boundary."""
    edge = boundary_pixels(mask)
    if not edge.any():
        return np.zeros_like(edge)
    dist = ndimage.distance_transform_cdt(~edge, metric="chessboard")
    return dist <= radius_px


def mba_radii(shape, n_radii=5):
    """Band radii: ``n_radii`` values from 1px to 2% of the diagonal (at least 3px)."""
    diag = float(np.hypot(*shape[:2]))
    r_max = max(3.0, 0.02 * diag)
    return [int(np.floor(r + 0.5)) for r in np.linspace(1.0, r_max, n_radii)]


def mba(pred, gt, n_radii=5, radii=None):
    """Mean boundary accuracy.

    Returns ``(mba, [(radius, accuracy), ...])``. When ``gt`` has no
    boundary at all the score falls back to plain pixel accuracy and the
    per-radius list is empty.
    """
    pred, gt = _check_pair(pred, gt)
    correct = pred == gt
    if not boundary_pixels(gt).any():
        return float(correct.mean()), []
    if radii is None:
        radii = mba_radii(gt.shape, n_radii)
    per_radius = []
    for r in radii:
        band = boundary_band(gt, r)
        per_radius.append((int(r), float(correct[band].mean())))
    return float(np.mean([a for _, a in per_radius])), per_radius


@dataclass
class EvalReport:
    iou: float
    mba: float
    per_radius_accuracy: list = field(default_factory=list)
    name: str = ""
    no_boundary: bool = False

    def to_json(self):
        d = asdict(self)
        d["per_radius_accuracy"] = [list(p) for p in self.per_radius_accuracy]
        return json.dumps(d, sort_keys=True)


def evaluate(pred, gt, n_radii=5, name=""):
    """Binarize at 0.5 and score a prediction against ground truth."""
    pred_b, gt_b = binarize(pred), binarize(gt)
    if pred_b.shape != gt_b.shape:
        raise ShapeError(f"mask shapes differ: {pred_b.shape} vs {gt_b.shape}")
    score, per_radius = mba(pred_b, gt_b, n_radii=n_radii)
    return EvalReport(
        iou=iou(pred_b, gt_b),
        mba=score,
        per_radius_accuracy=per_radius,
        name=name,
        no_boundary=not per_radius,
    )


def aggregate(reports, name="mean"):
    """Mean IoU / mBA over reports; an empty list gives NaN scores."""
    if not reports:
        return EvalReport(iou=float("nan"), mba=float("nan"), name=name)
    return EvalReport(
        iou=float(np.mean([r.iou for r in reports])),
        mba=float(np.mean([r.mba for r in reports])),
        name=name,
    )


def write_reports_jsonl(reports, path, aggregate_report=None):
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
        if aggregate_report is not None:
            fh.write(aggregate_report.to_json() + "\n")


def write_reports_csv(reports, path, aggregate_report=None, extra_rows=()):
    """CSV with header ``name,iou,mba,status``; ``extra_rows`` are (name, status) error rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "iou", "mba", "status"])
        for r in reports:
            writer.writerow([r.name, f"{r.iou:.6f}", f"{r.mba:.6f}", "ok"])
        for name, status in extra_rows:
            writer.writerow([name, "", "", status])
        if aggregate_report is not None:
            writer.writerow([aggregate_report.name, f"{aggregate_report.iou:.6f}",
                             f"{aggregate_report.mba:.6f}", "aggregate"])
