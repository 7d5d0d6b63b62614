"""Desk-scale studies: receptive field, category generalisation, affinity radius,
component and loss ablations, and export of the predicted mapping parameters.

Every study trains one model per arm, scores it on a fixed held-out set and
returns a list of row dicts (also written as CSV when ``out`` is given).
Arm results are cached on disk under a directory named after the hash of
the arm's training config and evaluation set, so reruns and duplicate arms
are free. The cache root is ``$AIRM_CACHE_DIR`` or ``~/.cache/airm``.
"""

import csv
import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np
import torch

from .datagen import CATEGORIES, derive_seed, generate_scene, perturb_mask
from .errors import ParameterError
from .inference import evaluate_samples
from .metrics import aggregate
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

CACHE_VERSION = 1
EVAL_SEED = 12345
STUDIES = ("rf", "category", "radius", "component", "loss", "embed")
LOSS_TERMS = ("l1", "l2", "ce", "grad")


def cache_root():
    return os.environ.get("AIRM_CACHE_DIR") or os.path.join(os.path.expanduser("~"), ".cache", "airm")


@dataclass(frozen=True)
class EvalSet:
    """Held-out scenes with coarse masks drawn from ``iou_band``."""

    n: int = 16
    size: tuple = (64, 64)
    iou_band: tuple = (0.8, 0.9)
    seed: int = EVAL_SEED
    categories: tuple = CATEGORIES
    max_shapes: int = 2
    ratios: tuple = (1.0,)

    def key(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    def samples(self):
        """(image, gt, coarse, category) for each held-out scene."""
        out = []
        for i in range(self.n):
            s = derive_seed(self.seed, i)
            scene = generate_scene(s, self.size, 1 + i % self.max_shapes, self.categories)
            coarse = perturb_mask(scene.gt_mask, self.iou_band, seed=s + 1)
            out.append((scene.image, scene.gt_mask, coarse.mask, scene.category_name))
        return out


def _atomic_write(path, write):
    d = os.path.dirname(path)
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def arm_key(cfg, eval_set, extra=None):
    blob = json.dumps({"v": CACHE_VERSION, "cfg": cfg.to_dict(), "eval": eval_set.key(),
                       "extra": extra}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


class ArmCache:
    """Config-hash-named directories holding ``result.json`` and ``model.ckpt``."""

    def __init__(self, root=None):
        self.root = root or cache_root()

    def path(self, key, name):
        return os.path.join(self.root, key, name)

    def get(self, key):
        p = self.path(key, "result.json")
        if not os.path.exists(p):
            return None
        with open(p) as fh:
            return json.load(fh)

    def put(self, key, result, ckpt=None):
        if ckpt is not None:
            _atomic_write(self.path(key, "model.ckpt"), lambda t: save_checkpoint(ckpt, t))

        def dump(tmp):
            with open(tmp, "w") as fh:
                json.dump(result, fh, indent=1, sort_keys=True)
        _atomic_write(self.path(key, "result.json"), dump)

    def checkpoint(self, key):
        p = self.path(key, "model.ckpt")
        return load_checkpoint(p) if os.path.exists(p) else None


def _score(ckpt, samples, ratios):
    before, after = evaluate_samples(ckpt, [s[:3] for s in samples], ratios)
    ref, co = aggregate(after), aggregate(before)
    return {"iou": ref.iou, "mba": ref.mba, "coarse_iou": co.iou, "coarse_mba": co.mba,
            "per_scene_iou": [r.iou for r in after]}


def run_arm(cfg, eval_set=None, cache=None, train_kwargs=None, extra_key=None):
    """Train ``cfg`` (or reuse the cached run) and score it on ``eval_set``.

    Returns ``(result_dict, checkpoint)``; the dict holds refined and coarse
    mean IoU/mBA and a ``cached`` flag.
    """
    eval_set = eval_set or EvalSet()
    cache = cache or ArmCache()
    key = arm_key(cfg, eval_set, extra_key)
    hit = cache.get(key)
    if hit is not None:
        ckpt = cache.checkpoint(key)
        if ckpt is not None:
            hit["cached"] = True
            return hit, ckpt
    log.info("training arm %s (%s/%s, seed %d)", key, cfg.encoder, cfg.mapping, cfg.seed)
    t0 = time.perf_counter()
    ckpt = train(cfg, **(train_kwargs or {}))
    seconds = time.perf_counter() - t0
    result = _score(ckpt, eval_set.samples(), eval_set.ratios)
    result.update(key=key, seed=cfg.seed, train_seconds=seconds)
    cache.put(key, result, ckpt)
    result["cached"] = False
    return result, ckpt


def write_rows(rows, path, header):
    def dump(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r.get(k)) for k in header})
    _atomic_write(os.path.abspath(path), dump)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else v


def _finish(rows, out, header):
    for r in rows:
        r.setdefault("profile", "desk")
    if out:
        write_rows(rows, out, header)
    return rows


def _desk(cfg):
    cfg = cfg or TrainConfig()
    if cfg.profile != "desk":
        raise ParameterError("studies run on the desk profile only")
    return cfg


# -- studies ----------------------------------------------------------------

RF_HEADER = ["kernel", "depth", "receptive_field", "iou", "mba", "seed", "profile"]


def receptive_field_sweep(kernel_sizes, cfg=None, eval_set=None, cache=None, out=None):
    """CNN encoder + shared mapping for each kernel size; IoU against receptive field."""
    from .encoder import receptive_field_of
    cfg = _desk(cfg)
    rows = []
    for k in kernel_sizes:
        arm = cfg.replace(encoder="cnn", mapping="sirmf", cnn_kernel=int(k), use_affinity=False)
        res, _ = run_arm(arm, eval_set, cache)
        rows.append({"kernel": int(k), "depth": arm.cnn_depth,
                     "receptive_field": receptive_field_of(int(k), arm.cnn_depth, 4),
                     "iou": res["iou"], "mba": res["mba"], "seed": arm.seed})
    return _finish(rows, out, RF_HEADER)


def spearman(x, y):
    from scipy.stats import spearmanr
    if len(x) < 2:
        return float("nan")
    return float(spearmanr(x, y).statistic)


CATEGORY_HEADER = ["category", "pooled_iou", "per_category_iou", "adaptive_iou", "seed", "profile"]


def category_generalization(categories, cfg=None, eval_set=None, cache=None, out=None):
    """One shared decoder for all categories against one decoder per category.

    The pooled arm trains a CNN encoder with one shared mapping on every
    listed category. The per-category arm keeps that encoder frozen and
    trains a fresh shared mapping on each category alone. The adaptive arm trains the
    same CNN encoder with the hypernetwork mapping on every category. Each
    arm is scored per category on the held-out scenes of that category.
    """
    cfg = _desk(cfg)
    categories = tuple(categories)
    if not categories or any(c not in CATEGORIES for c in categories):
        raise ParameterError(f"categories must be drawn from {CATEGORIES}, got {categories}")
    eval_set = eval_set or EvalSet()
    base = cfg.replace(encoder="cnn", use_affinity=False, categories=categories)

    def per_category(cat):
        return EvalSet(eval_set.n, eval_set.size, eval_set.iou_band, eval_set.seed, (cat,),
                       eval_set.max_shapes, eval_set.ratios)

    pooled_cfg = base.replace(mapping="sirmf")
    _, pooled_ckpt = run_arm(pooled_cfg, eval_set, cache)
    airmf_cfg = base.replace(mapping="airmf")
    _, airmf_ckpt = run_arm(airmf_cfg, eval_set, cache)
    encoder_init = {k: v for k, v in pooled_ckpt.params.items() if k.startswith("encoder.")}

    rows = []
    for cat in categories:
        ev = per_category(cat)
        samples = ev.samples()
        pooled = _score(pooled_ckpt, samples, ev.ratios)["iou"]
        adaptive = _score(airmf_ckpt, samples, ev.ratios)["iou"]
        if len(categories) == 1:
            single = pooled  # the same training set, so the same run
        else:
            single_cfg = pooled_cfg.replace(categories=(cat,))
            res, _ = run_arm(single_cfg, ev, cache,
                             train_kwargs={"init_params": encoder_init, "freeze": ("encoder",)},
                             extra_key={"frozen_encoder": pooled_cfg.digest()})
            single = res["iou"]
        rows.append({"category": cat, "pooled_iou": pooled, "per_category_iou": single, "adaptive_iou": adaptive,
                     "seed": cfg.seed})
    return _finish(rows, out, CATEGORY_HEADER)


RADIUS_HEADER = ["R", "iou", "mba", "seed", "profile"]


def radius_sweep(R_values, cfg=None, eval_set=None, cache=None, out=None):
    """Affinity-loss window radius (in grid cells) against refinement quality."""
    cfg = _desk(cfg)
    rows = []
    for R in R_values:
        res, _ = run_arm(cfg.replace(R=int(R), use_affinity=True), eval_set, cache)
        rows.append({"R": int(R), "iou": res["iou"], "mba": res["mba"], "seed": cfg.seed})
    return _finish(rows, out, RADIUS_HEADER)


COMPONENT_HEADER = ["aee", "affinity_loss", "airmf", "iou", "mba", "seed", "profile"]


def component_config(cfg, aee=True, affinity_loss=True, airmf=True):
    return cfg.replace(encoder="aee" if aee else "cnn", mapping="airmf" if airmf else "sirmf",
                       use_affinity=bool(affinity_loss))


def component_ablation(flag_sets, cfg=None, eval_set=None, cache=None, out=None, seeds=None):
    """One run per (flags, seed); flags are dicts with keys aee, affinity_loss, airmf."""
    cfg = _desk(cfg)
    rows = []
    for flags in flag_sets:
        flags = {k: bool(flags.get(k, True)) for k in ("aee", "affinity_loss", "airmf")}
        for seed in seeds or [cfg.seed]:
            res, _ = run_arm(component_config(cfg.replace(seed=seed), **flags), eval_set, cache)
            rows.append({**flags, "iou": res["iou"], "mba": res["mba"], "seed": seed})
    return _finish(rows, out, COMPONENT_HEADER)


def parse_flags(text):
    """Parse flags written like 'aee+aff+airmf'; any component not named is switched off."""
    tokens = {t.strip().lower() for t in text.split("+") if t.strip()}
    aliases = {"aee": "aee", "cnn": None, "aff": "affinity_loss", "affinity": "affinity_loss",
               "airmf": "airmf", "sirmf": None}
    unknown = tokens - set(aliases)
    if unknown:
        raise ParameterError(f"unknown component(s) {sorted(unknown)}; use aee/cnn, aff, airmf/sirmf")
    on = {aliases[t] for t in tokens if aliases[t]}
    return {k: k in on for k in ("aee", "affinity_loss", "airmf")}


LOSS_HEADER = ["terms", "iou", "mba", "seed", "profile"]


def loss_ablation(term_sets, cfg=None, eval_set=None, cache=None, out=None):
    """Train with only the listed L_AIRMF terms switched on (others weighted 0)."""
    cfg = _desk(cfg)
    defaults = TrainConfig()
    rows = []
    for terms in term_sets:
        terms = tuple(terms.split("+")) if isinstance(terms, str) else tuple(terms)
        bad = set(terms) - set(LOSS_TERMS)
        if bad or not terms:
            raise ParameterError(f"loss terms must be a non-empty subset of {LOSS_TERMS}")
        weights = {f"w_{t}": (getattr(defaults, f"w_{t}") if t in terms else 0.0) for t in LOSS_TERMS}
        res, _ = run_arm(cfg.replace(**weights), eval_set, cache)
        rows.append({"terms": "+".join(t for t in LOSS_TERMS if t in terms), "iou": res["iou"],
                     "mba": res["mba"], "seed": cfg.seed})
    return _finish(rows, out, LOSS_HEADER)


@torch.no_grad()
def export_param_embeddings(ckpt, scenes, out=None):
    """Flattened (A, B, b) emitted for each scene, with its category label.

    ``scenes`` holds Scene objects or (image, mask, category) triples; the
    scene's own ground-truth mask is used as the coarse input. Returns an
    (n, P) array and the labels; writes ``scene,category,p0..`` CSV rows.
    """
    model = ckpt if isinstance(ckpt, torch.nn.Module) else ckpt.build_model()
    model.eval()
    if model.mapping_kind != "airmf":
        raise ParameterError("parameter embeddings need a checkpoint with the hypernetwork mapping")
    dtype = next(model.parameters()).dtype
    rows, labels = [], []
    for s in scenes:
        image, mask, cat = (s.image, s.gt_mask, s.category_name) if hasattr(s, "image") else s
        x = np.concatenate([image, mask.reshape(*mask.shape[:2], 1)], axis=-1).transpose(2, 0, 1)
        feat, _ = model.encode(torch.from_numpy(np.ascontiguousarray(x))[None].to(dtype))
        rows.append(model.mapping_params(feat).flatten()[0].double().numpy())
        labels.append(cat)
    width = sum(model.mapping.sizes)
    emb = np.stack(rows) if rows else np.zeros((0, width))
    if out:
        def dump(tmp):
            with open(tmp, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["scene", "category"] + [f"p{i}" for i in range(width)])
                for i, (row, cat) in enumerate(zip(emb, labels)):
                    w.writerow([i, cat] + [f"{v:.7g}" for v in row])
        _atomic_write(os.path.abspath(out), dump)
    return emb, labels


def embedding_separation(emb, labels):
    """(mean within-category L2, mean cross-category L2) over all scene pairs."""
    within, across = [], []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            d = float(np.linalg.norm(emb[i] - emb[j]))
            (within if labels[i] == labels[j] else across).append(d)
    return (float(np.mean(within)) if within else float("nan"),
            float(np.mean(across)) if across else float("nan"))


def embedding_scenes(n, size=(64, 64), seed=EVAL_SEED + 1, categories=CATEGORIES):
    """Single-object scenes cycling through ``categories``."""
    return [generate_scene(derive_seed(seed, i), size, 1, [categories[i % len(categories)]])
            for i in range(n)]


def run_study(study, values, cfg=None, out=None, cache=None, eval_set=None):
    """Dispatch used by the command line; ``values`` are the raw strings for the study."""
    if study not in STUDIES:
        raise ParameterError(f"unknown study {study!r}; valid: {', '.join(STUDIES)}")
    cfg = _desk(cfg)
    if study == "rf":
        return receptive_field_sweep([int(v) for v in values or (1, 3, 5, 7)], cfg, eval_set, cache, out)
    if study == "category":
        return category_generalization(values or CATEGORIES[:3], cfg, eval_set, cache, out)
    if study == "radius":
        return radius_sweep([int(v) for v in values or (1, 3, 5)], cfg, eval_set, cache, out)
    if study == "component":
        specs = values or ["aee+aff+airmf", "aee+aff", "aee+airmf", "cnn+airmf", "cnn"]
        return component_ablation([parse_flags(v) for v in specs], cfg, eval_set, cache, out)
    if study == "loss":
        return loss_ablation(values or ["l1", "l1+l2", "l1+l2+ce", "l1+l2+ce+grad"], cfg, eval_set,
                             cache, out)
    n = int(values[0]) if values else 16
    _, ckpt = run_arm(cfg.replace(mapping="airmf"), eval_set, cache)
    emb, labels = export_param_embeddings(ckpt, embedding_scenes(n), out)
    within, across = embedding_separation(emb, labels)
    return [{"n": len(labels), "width": emb.shape[1], "within_l2": within, "across_l2": across,
             "profile": "desk"}]
