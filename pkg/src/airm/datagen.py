"""Synthetic scenes, perturbed coarse masks, crops and PNG I/O.

Every function here is a pure function of its arguments and seed, so the
whole pipeline can run without any external dataset.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ParameterError, PerturbationError, RasterIOError
from .metrics import iou

log = logging.getLogger(__name__)

CATEGORIES = ("disk", "rectangle", "ring", "star")
MIN_SIZE = 16


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    gt_mask: np.ndarray  # (H, W, 1) float32 in {0, 1}
    category: int
    seed: int

    @property
    def category_name(self):
        return CATEGORIES[self.category]


@dataclass
class CoarseMask:
    mask: np.ndarray  # (H, W, 1) float32 in {0, 1}
    achieved_iou: float


def category_index(name):
    if isinstance(name, (int, np.integer)):
        if not 0 <= name < len(CATEGORIES):
            raise ParameterError(f"unknown category index {name}")
        return int(name)
    try:
        return CATEGORIES.index(name)
    except ValueError:
        raise ParameterError(f"unknown category {name!r}; valid: {', '.join(CATEGORIES)}") from None


def derive_seed(base, *keys):
    """Independent 64-bit seed for a sub-task of ``base``."""
    return int(np.random.SeedSequence([int(base), *map(int, keys)]).generate_state(1, np.uint64)[0])


def _shape_mask(category, rng, yy, xx, scale):
    """One randomly placed instance; coordinates are in units of min(H, W)."""
    cy, cx = rng.uniform(0.3, 0.7, size=2) * np.array([yy.max(), xx.max()])
    dy, dx = yy - cy, xx - cx
    name = CATEGORIES[category]
    if name == "disk":
        r = rng.uniform(0.12, 0.26) * scale
        return dy**2 + dx**2 <= r**2
    if name == "rectangle":
        a, b = rng.uniform(0.1, 0.25, size=2) * scale
        t = rng.uniform(0, np.pi)
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if name == "ring":
        r_out = rng.uniform(0.17, 0.28) * scale
        r_in = r_out * rng.uniform(0.45, 0.62)
        d2 = dy**2 + dx**2
        return (d2 <= r_out**2) & (d2 >= r_in**2)
    # star: radial profile with k spikes
    k = int(rng.integers(5, 8))
    r0 = rng.uniform(0.15, 0.24) * scale
    amp = rng.uniform(0.3, 0.45)
    phase = rng.uniform(0, 2 * np.pi)
    theta = np.arctan2(dy, dx)
    return np.hypot(dy, dx) <= r0 * (1 + amp * np.cos(k * theta + phase))


def _colors(rng):
    while True:
        bg, fg = rng.uniform(0.05, 0.95, size=(2, 3))
        if np.linalg.norm(bg - fg) >= 0.45:
            return bg, fg


def generate_scene(seed, size=(64, 64), n_shapes=1, category_set=CATEGORIES):
    """Textured scene whose foreground is ``n_shapes`` instances of one category."""
    H, W = size
    if H < MIN_SIZE or W < MIN_SIZE:
        raise ParameterError(f"scene size must be at least {MIN_SIZE}x{MIN_SIZE}, got {H}x{W}")
    if n_shapes < 1:
        raise ParameterError("n_shapes must be >= 1")
    if not category_set:
        raise ParameterError("category_set is empty")
    cats = [category_index(c) for c in category_set]

    rng = np.random.default_rng(seed)
    category = cats[int(rng.integers(len(cats)))]
    yy, xx = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    scale = min(H, W)
    mask = np.zeros((H, W), dtype=bool)
    for _ in range(n_shapes):
        mask |= _shape_mask(category, rng, yy, xx, scale)

    bg, fg = _colors(rng)
    # low-frequency shading on the background, stripes on the foreground
    g = rng.normal(size=2)
    shade = 0.08 * (g[0] * (yy / H - 0.5) + g[1] * (xx / W - 0.5))
    freq = rng.uniform(4, 10) * 2 * np.pi / scale
    ang = rng.uniform(0, np.pi)
    stripes = 0.06 * np.sin(freq * (xx * np.cos(ang) + yy * np.sin(ang)))
    noise = rng.normal(scale=0.04, size=(H, W, 3))
    image = np.where(mask[..., None], fg + stripes[..., None], bg + shade[..., None]) + noise
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Scene(image=image, gt_mask=mask[..., None].astype(np.float32),
                 category=category, seed=int(seed))


def _signed_distance(mask):
    """Positive inside, negative outside; |value| >= 1 on every pixel."""
    return ndimage.distance_transform_edt(mask) - ndimage.distance_transform_edt(~mask)


class _PerturbationFields:
    """Random ingredients of one perturbation; strength scales all of them."""

    def __init__(self, gt, rng):
        H, W = gt.shape
        scale = min(H, W)
        self.sdf = _signed_distance(gt)
        noise = ndimage.gaussian_filter(rng.normal(size=(H, W)), sigma=max(1.0, 0.04 * scale))
        self.jitter = noise / (noise.std() + 1e-12) * 0.06 * scale
        self.shift = rng.uniform(-1, 1) * 0.04 * scale
        n_blobs = int(rng.integers(0, 4))
        self.blobs = []
        ys, xs = np.nonzero(np.abs(self.sdf) <= 2)
        yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        for _ in range(n_blobs if len(ys) else 0):
            k = int(rng.integers(len(ys)))
            d2 = (yy - ys[k]) ** 2 + (xx - xs[k]) ** 2
            self.blobs.append((np.sqrt(d2), rng.uniform(0.03, 0.08) * scale, bool(rng.integers(2))))

    def apply(self, strength):
        out = self.sdf + strength * (self.jitter + self.shift) > 0
        for dist, radius, add in self.blobs:
            region = dist <= strength * radius
            out = out | region if add else out & ~region
        return out


def perturb_mask(gt, iou_range=(0.8, 1.0), seed=0, max_tries=8):
    """Binary coarse mask whose IoU with ``gt`` falls inside ``iou_range``.

    A target IoU is drawn uniformly from the band, then the strength of a
    random dilation/erosion + boundary jitter + blob perturbation is
    bisected until the target band is hit.
    """
    lo, hi = iou_range
    if not 0 < lo <= hi <= 1:
        raise ParameterError(f"invalid IoU band {iou_range}")
    gt_b = np.asarray(gt).reshape(np.shape(gt)[:2]) > 0.5
    if hi == 1.0 and lo == 1.0:
        return CoarseMask(mask=gt_b[..., None].astype(np.float32), achieved_iou=1.0)

    rng = np.random.default_rng(seed)
    best, best_gap = None, np.inf
    for _ in range(max_tries):
        target = rng.uniform(lo, hi)
        fields = _PerturbationFields(gt_b, rng)
        s_lo, s_hi = 0.0, 1.0
        while iou(fields.apply(s_hi), gt_b) > target and s_hi < 64:
            s_hi *= 2
        found = None
        for _ in range(40):
            mid = 0.5 * (s_lo + s_hi)
            cand = fields.apply(mid)
            score = iou(cand, gt_b)
            gap = abs(score - target)
            if lo <= score <= hi and (found is None or gap < found[2]):
                found = (cand, score, gap)
            if best is None or _band_gap(score, lo, hi) < best_gap:
                best, best_gap = score, _band_gap(score, lo, hi)
            if gap < 2e-3 and found is not None:
                break
            if score >= target:
                s_lo = mid
            else:
                s_hi = mid
        if found is not None:
            return CoarseMask(mask=found[0][..., None].astype(np.float32), achieved_iou=found[1])
    raise PerturbationError(f"IoU band {iou_range} not reached in {max_tries} tries", best)


def _band_gap(score, lo, hi):
    return max(lo - score, score - hi, 0.0)


def crop_sample(scene, coarse, crop, seed):
    """Aligned random crop of (image, gt, coarse)."""
    image, gt = scene.image, scene.gt_mask
    mask = coarse.mask if isinstance(coarse, CoarseMask) else coarse
    H, W = image.shape[:2]
    h, w = crop
    if h > H or w > W or h < 1 or w < 1:
        raise ParameterError(f"crop {crop} does not fit scene of size {(H, W)}")
    rng = np.random.default_rng(seed)
    y = int(rng.integers(H - h + 1))
    x = int(rng.integers(W - w + 1))
    win = (slice(y, y + h), slice(x, x + w))
    return image[win], gt[win], mask[win]


def to_uint8(plane):
    """Round a [0, 1] plane to the 8-bit levels a PNG stores."""
    return np.floor(np.clip(np.asarray(plane, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(plane, path):
    """Write an (H, W), (H, W, 1) or (H, W, 3) plane in [0, 1] as 8-bit PNG."""
    arr = np.asarray(plane, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if not (arr.ndim == 2 or (arr.ndim == 3 and arr.shape[-1] == 3)):
        raise RasterIOError(f"cannot write plane of shape {np.shape(plane)} as PNG")
    q = to_uint8(arr)
    Image.fromarray(q, mode="L" if q.ndim == 2 else "RGB").save(path, format="PNG")


def load_png(path, channels=None):
    """Read a PNG as float32 (H, W, C) in [0, 1]; optionally enforce C."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "1", "I;16", "I"):
                arr = np.asarray(im.convert("L"))[..., None]
            elif im.mode in ("RGB", "RGBA", "P"):
                arr = np.asarray(im.convert("RGB"))
            else:
                raise RasterIOError(f"{path}: unsupported PNG mode {im.mode}")
    except RasterIOError:
        raise
    except (OSError, ValueError, SyntaxError) as exc:
        raise RasterIOError(f"{path}: {exc}") from exc
    if channels is not None and arr.shape[-1] != channels:
        raise RasterIOError(f"{path}: expected {channels} channel(s), found {arr.shape[-1]}")
    return arr.astype(np.float32) / 255.0


# dataset directory layout: <root>/<split>/<scene_id>/{image,gt,coarse}.png + meta.txt


def write_meta(path, meta):
    with open(path, "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")


def read_meta(path):
    meta = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    return meta


def _write_scene(args):
    split_dir, i, seed, size, categories, iou_range, max_shapes = args
    scene_seed = derive_seed(seed, i)
    n_shapes = 1 + int(np.random.default_rng(scene_seed).integers(max_shapes))
    scene = generate_scene(scene_seed, size, n_shapes, categories)
    coarse = perturb_mask(scene.gt_mask, iou_range, seed=derive_seed(scene_seed, 1))
    sid = f"scene_{i:04d}"
    d = os.path.join(split_dir, sid)
    os.makedirs(d, exist_ok=True)
    save_png(scene.image, os.path.join(d, "image.png"))
    save_png(scene.gt_mask, os.path.join(d, "gt.png"))
    save_png(coarse.mask, os.path.join(d, "coarse.png"))
    write_meta(os.path.join(d, "meta.txt"), {
        "seed": scene_seed,
        "category": scene.category_name,
        "achieved_iou": repr(coarse.achieved_iou),
    })
    return (os.path.join(sid, "image.png"), os.path.join(sid, "coarse.png"),
            os.path.join(sid, "gt.png"))


def generate_dataset(root, split, n, size=(64, 64), seed=0, categories=CATEGORIES,
                     iou_range=(0.8, 1.0), max_shapes=2, workers=1):
    """Materialize ``n`` scenes under ``<root>/<split>`` plus a manifest.tsv.

    Every scene depends only on ``(seed, index)``, so the tree is identical
    whatever the number of ``workers``.
    """
    split_dir = os.path.join(root, split)
    os.makedirs(split_dir, exist_ok=True)
    jobs = [(split_dir, i, seed, tuple(size), tuple(categories), tuple(iou_range), max_shapes)
            for i in range(n)]
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_write_scene, jobs))
    else:
        rows = [_write_scene(job) for job in jobs]
    with open(os.path.join(split_dir, "manifest.tsv"), "w") as fh:
        for row in rows:
            fh.write("\t".join(row) + "\n")
    return split_dir


def load_split(root, split):
    """Read back ``(scene_id, Scene, CoarseMask)`` triples written by generate_dataset."""
    split_dir = os.path.join(root, split)
    if not os.path.isdir(split_dir):
        raise RasterIOError(f"no dataset split at {split_dir}")
    out = []
    for sid in sorted(os.listdir(split_dir)):
        d = os.path.join(split_dir, sid)
        if not os.path.isdir(d):
            continue
        meta = read_meta(os.path.join(d, "meta.txt"))
        scene = Scene(
            image=load_png(os.path.join(d, "image.png"), channels=3),
            gt_mask=(load_png(os.path.join(d, "gt.png"), channels=1) > 0.5).astype(np.float32),
            category=category_index(meta.get("category", CATEGORIES[0])),
            seed=int(meta.get("seed", 0)),
        )
        coarse = load_png(os.path.join(d, "coarse.png"), channels=1)
        coarse = (coarse > 0.5).astype(np.float32)
        out.append((sid, scene, CoarseMask(coarse, float(meta.get("achieved_iou", "nan")))))
    return out
