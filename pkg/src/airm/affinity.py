"""Ground-truth affinity, radius-limited pair mining and the affinity loss."""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ParameterError

log = logging.getLogger(__name__)

EPS = 1e-7
_clamp_warned = False


@dataclass
class PairSets:
    """Unordered (i, j) flat-index pairs with i < j, split by label equality."""

    positives: np.ndarray  # (n_pos, 2) int64
    negatives: np.ndarray  # (n_neg, 2) int64
    radius: int

    def __len__(self):
        return len(self.positives) + len(self.negatives)


def grid_labels(gt, h, w):
    """Nearest-neighbour downsample of a binary mask to an (h, w) label grid."""
    gt = np.asarray(gt)
    if gt.ndim == 3:
        gt = gt[..., 0]
    H, W = gt.shape
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return (gt[np.ix_(rows, cols)] > 0.5).astype(np.int64)


def build_gt_affinity(gt, h, w):
    """(hw, hw) matrix: 1 where two grid cells carry the same label, else 0."""
    lab = grid_labels(gt, h, w).ravel()
    return (lab[:, None] == lab[None, :]).astype(np.float64)


def _window_pairs(h, w, R):
    """All unordered flat-index pairs within Chebyshev distance R, i < j."""
    ys, xs = np.divmod(np.arange(h * w), w)
    chunks = []
    for dy in range(0, R + 1):
        for dx in range(-R, R + 1):
            if dy == 0 and dx <= 0:
                continue
            ok = (ys + dy < h) & (xs + dx >= 0) & (xs + dx < w)
            i = np.nonzero(ok)[0]
            chunks.append(np.stack([i, i + dy * w + dx], axis=1))
    if not chunks:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(chunks).astype(np.int64)


def build_pair_set(gt_grid, R, max_pairs=None, seed=0):
    """Mine positive/negative pairs inside a (2R+1)^2 window on a label grid.

    If more than ``max_pairs`` pairs exist, a seeded uniform subsample is
    drawn that keeps the positive:negative ratio.
    """
    if R < 1:
        raise ParameterError(f"radius must be >= 1, got {R}")
    grid = np.asarray(gt_grid)
    h, w = grid.shape
    pairs = _window_pairs(h, w, R)
    lab = grid.ravel()
    same = lab[pairs[:, 0]] == lab[pairs[:, 1]]
    pos, neg = pairs[same], pairs[~same]
    total = len(pairs)
    if max_pairs is not None and total > max_pairs:
        rng = np.random.default_rng(seed)
        n_pos = int(round(max_pairs * len(pos) / total))
        n_neg = max_pairs - n_pos
        pos = pos[np.sort(rng.choice(len(pos), n_pos, replace=False))]
        neg = neg[np.sort(rng.choice(len(neg), n_neg, replace=False))]
    return PairSets(positives=pos, negatives=neg, radius=R)


def _clamp(p):
    global _clamp_warned
    if not _clamp_warned:
        with torch.no_grad():
            if bool(((p < EPS) | (p > 1 - EPS)).any()):
                log.warning("affinity predictions clamped to [%g, 1 - %g]", EPS, EPS)
                _clamp_warned = True
    return p.clamp(EPS, 1 - EPS)


def affinity_loss(aff_pre, pairs):
    """-mean_{S-} log(1 - Aff) - mean_{S+} log(Aff); an empty subset adds 0.

    Accepts a torch tensor (differentiable) or a numpy array (returns float).
    """
    as_numpy = not torch.is_tensor(aff_pre)
    aff = torch.as_tensor(np.asarray(aff_pre)) if as_numpy else aff_pre
    loss = aff.new_zeros(())
    if len(pairs.negatives):
        n = torch.as_tensor(pairs.negatives, device=aff.device)
        loss = loss - torch.log1p(-_clamp(aff[n[:, 0], n[:, 1]])).mean()
    if len(pairs.positives):
        p = torch.as_tensor(pairs.positives, device=aff.device)
        loss = loss - torch.log(_clamp(aff[p[:, 0], p[:, 1]])).mean()
    return float(loss) if as_numpy else loss


def batch_affinity_loss(aff_pre, pair_sets):
    """Mean of ``affinity_loss`` over a (B, N, N) batch."""
    losses = [affinity_loss(a, ps) for a, ps in zip(aff_pre, pair_sets)]
    return torch.stack(losses).mean()
