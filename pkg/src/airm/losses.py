"""Mask losses: L1, L2, binary cross-entropy, gradient loss and their mixes."""

from dataclasses import dataclass

import torch

from .errors import ParameterError, ShapeError

EPS = 1e-7


@dataclass
class LossWeights:
    l1: float = 0.2
    l2: float = 0.2
    ce: float = 0.3
    grad: float = 0.4
    airmf: float = 0.5
    aff: float = 0.5

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ParameterError(f"loss weight {k} must be >= 0, got {v}")


def _check(pred, gt):
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} differ")


def l1_loss(pred, gt):
    _check(pred, gt)
    return (pred - gt).abs().mean()


def l2_loss(pred, gt):
    _check(pred, gt)
    return ((pred - gt) ** 2).mean()


def ce_loss(pred, gt):
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    _check(pred, gt)
    p = pred.clamp(EPS, 1 - EPS)
    return -(gt * torch.log(p) + (1 - gt) * torch.log1p(-p)).mean()


def grad_loss(pred, gt):
    """Average over x and y of the mean |forward difference of pred - that of gt|.

    The last two axes are treated as (rows, cols).
    """
    _check(pred, gt)
    d = pred - gt
    gx = (d[..., :, 1:] - d[..., :, :-1]).abs()
    gy = (d[..., 1:, :] - d[..., :-1, :]).abs()
    terms = [g.mean() for g in (gx, gy) if g.numel()]
    if not terms:
        return d.new_zeros(())
    return sum(terms) / len(terms)


TERMS = {"l1": l1_loss, "l2": l2_loss, "ce": ce_loss, "grad": grad_loss}


def combined_airmf_loss(pred, gt, weights=None):
    """Weighted mask loss; returns ``(total, {term: value})``."""
    w = weights or LossWeights()
    parts = {name: fn(pred, gt) for name, fn in TERMS.items()}
    total = sum(getattr(w, name) * value for name, value in parts.items())
    return total, parts


def total_loss(airmf_term, aff_term, weights=None):
    w = weights or LossWeights()
    return w.airmf * airmf_term + w.aff * aff_term
