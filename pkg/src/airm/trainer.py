"""Training loop, learning-rate schedule, config files and checkpoints."""

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch

from .affinity import batch_affinity_loss, build_pair_set, grid_labels
from .datagen import (CATEGORIES, crop_sample, derive_seed, generate_scene, load_split,
                      perturb_mask)
from .errors import CheckpointError, NumericalError, ParameterError
from .losses import LossWeights, combined_airmf_loss, total_loss
from .model import RefinementNet

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_HEADER = ["iter", "loss_total", "loss_airmf", "loss_aff", "lr"]


@dataclass
class TrainConfig:
    profile: str = "desk"
    seed: int = 0
    # optimisation
    lr: float = 1e-3
    total_iters: int = 2000
    decay_iters: tuple = (1000, 1667)
    batch_size: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dtype: str = "float32"
    deterministic: bool = True
    # data
    n_scenes: int = 64
    scene_size: tuple = (80, 80)
    crop: tuple = (64, 64)
    categories: tuple = CATEGORIES
    max_shapes: int = 2
    iou_band: tuple = (0.8, 1.0)
    # affinity
    use_affinity: bool = True
    R: int = 3
    max_pairs: int = 4096
    # loss weights
    w_l1: float = 0.2
    w_l2: float = 0.2
    w_ce: float = 0.3
    w_grad: float = 0.4
    w_airmf: float = 0.5
    w_aff: float = 0.5
    # architecture
    encoder: str = "aee"
    mapping: str = "airmf"
    feat_dim: int = 64
    aee_dims: tuple = (32, 64)
    aee_depths: tuple = (2, 2)
    aee_heads: tuple = (2, 2)
    cnn_kernel: int = 3
    cnn_depth: int = 4
    hidden: int = 64
    n_layers: int = 5
    rank: int = 20
    hyper_width: int = 64
    hyper_convs: int = 2

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        if list(self.decay_iters) != sorted(set(self.decay_iters)):
            raise ParameterError("decay_iters must be strictly increasing")
        if self.decay_iters and self.total_iters and self.decay_iters[-1] >= self.total_iters:
            raise ParameterError("decay_iters must lie below total_iters")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def loss_weights(self):
        return LossWeights(self.w_l1, self.w_l2, self.w_ce, self.w_grad, self.w_airmf, self.w_aff)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_text(self):
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_text(cls, text, base=None):
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"config line {n}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                raise ParameterError(f"config line {n}: unknown key {k!r}")
            values[k] = _parse_value(v, types[k], getattr(base, k))
        if values.get("profile") == "paper" and base.profile != "paper":
            base = paper_profile()
        return base.replace(**values)


def _format_value(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(text, typ, default):
    if typ is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ParameterError(f"not a boolean: {text!r}")
    if typ is tuple:
        items = [s for s in text.replace("x", ",").split(",") if s.strip()] if text else []
        elem = type(default[0]) if default else str
        if elem is str:
            items = [s for s in text.split(",") if s.strip()]
        try:
            return tuple(elem(s.strip()) for s in items)
        except ValueError as exc:
            raise ParameterError(str(exc)) from None
    try:
        return typ(text)
    except ValueError as exc:
        raise ParameterError(str(exc)) from None


def desk_profile(**kw):
    return TrainConfig(**kw)


def paper_profile(**kw):
    """Full-scale schedule; not used by any asserted desk result."""
    base = dict(profile="paper", lr=2.25e-5, total_iters=45000, decay_iters=(22500, 37500),
                crop=(224, 224), scene_size=(256, 256), R=14, hidden=256)
    base.update(kw)
    return TrainConfig(**base)


def lr_at(iteration, cfg):
    """Learning rate after stepping down by 10x at every passed decay iteration."""
    n = sum(1 for d in cfg.decay_iters if iteration >= d)
    return cfg.lr * (0.1 ** n)


def build_model(cfg):
    torch.manual_seed(cfg.seed)
    return RefinementNet(cfg).to(cfg.torch_dtype)


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    iteration: int
    config: dict
    version: int = CHECKPOINT_VERSION
    history: list = field(default_factory=list, repr=False, compare=False)

    @property
    def train_config(self):
        return TrainConfig.from_dict(self.config)

    def build_model(self):
        cfg = self.train_config
        model = RefinementNet(cfg).to(cfg.torch_dtype)
        state = model.state_dict()
        for name, arr in self.params.items():
            if name not in state:
                raise CheckpointError(f"checkpoint parameter {name!r} not in model")
            if tuple(state[name].shape) != arr.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {tuple(state[name].shape)}")
        missing = set(state) - set(self.params)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.params.items()})
        model.eval()
        return model


def model_state(model):
    out = {}
    for k, v in model.state_dict().items():
        a = v.detach().cpu().numpy()
        out[k] = a.astype(np.float32) if np.issubdtype(a.dtype, np.floating) else a.copy()
    return out


def _zinfo(name):
    zi = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    zi.compress_type = zipfile.ZIP_DEFLATED
    zi.external_attr = 0o644 << 16
    return zi


def save_checkpoint(ckpt, path):
    """Zip archive of .npy arrays plus a JSON manifest; byte-stable for equal content."""
    manifest = {
        "format": "airm-checkpoint",
        "version": ckpt.version,
        "iteration": ckpt.iteration,
        "config": ckpt.config,
        "shapes": {k: [list(v.shape), str(v.dtype)] for k, v in sorted(ckpt.params.items())},
    }
    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_zinfo("manifest.json"), json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(ckpt.params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(ckpt.params[name], order="C"), allow_pickle=False)
            zf.writestr(_zinfo(f"arrays/{name}.npy"), buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path):
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != "airm-checkpoint":
                raise CheckpointError(f"{path}: not an airm checkpoint")
            if manifest.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
            params = {}
            for name, (shape, dtype) in manifest["shapes"].items():
                arr = np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{name}.npy")),
                                               allow_pickle=False)
                if list(arr.shape) != list(shape) or str(arr.dtype) != dtype:
                    raise CheckpointError(
                        f"{path}: {name} stored as {arr.shape}/{arr.dtype}, manifest says {shape}/{dtype}")
                params[name] = arr
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return Checkpoint(params=params, iteration=manifest["iteration"], config=manifest["config"],
                      version=manifest["version"])


# -- data -------------------------------------------------------------------

def make_scenes(cfg, n=None, seed=None, categories=None, size=None):
    """In-memory synthetic training scenes."""
    n = cfg.n_scenes if n is None else n
    seed = cfg.seed if seed is None else seed
    cats = categories or cfg.categories
    size = size or cfg.scene_size
    scenes = []
    for i in range(n):
        s = derive_seed(seed, 7919, i)
        n_shapes = 1 + int(np.random.default_rng(s).integers(cfg.max_shapes))
        scenes.append(generate_scene(s, size, n_shapes, cats))
    return scenes


def sample_batch(scenes, cfg, iteration):
    """Perturb, crop and stack a batch; returns (x, gt, label_grids, batch_seed)."""
    batch_seed = derive_seed(cfg.seed, 104729, iteration)
    rng = np.random.default_rng(batch_seed)
    picks = rng.integers(len(scenes), size=cfg.batch_size)
    xs, gts, grids = [], [], []
    for k, i in enumerate(picks):
        scene = scenes[int(i)]
        coarse = perturb_mask(scene.gt_mask, cfg.iou_band, seed=derive_seed(batch_seed, k, 1))
        img, gt, cm = crop_sample(scene, coarse, cfg.crop, seed=derive_seed(batch_seed, k, 2))
        xs.append(np.concatenate([img, cm], axis=-1).transpose(2, 0, 1))
        gts.append(gt[..., 0])
        grids.append(grid_labels(gt, cfg.crop[0] // 4, cfg.crop[1] // 4))
    dtype = cfg.torch_dtype
    x = torch.from_numpy(np.stack(xs)).to(dtype)
    gt = torch.from_numpy(np.stack(gts)).to(dtype)
    return x, gt, grids, batch_seed


def compute_losses(model, x, gt, grids, cfg, pair_seed=0):
    """Forward one batch; returns a dict of scalar loss tensors and the outputs."""
    w = cfg.loss_weights
    use_aff = cfg.use_affinity and w.aff > 0
    out = model(x, out_res=tuple(gt.shape[-2:]), need_affinity=use_aff)
    l_airmf, parts = combined_airmf_loss(out["mask"], gt, w)
    if use_aff:
        pairs = [build_pair_set(g, cfg.R, cfg.max_pairs, seed=derive_seed(pair_seed, k))
                 for k, g in enumerate(grids)]
        l_aff = batch_affinity_loss(out["aff"], pairs)
        total = total_loss(l_airmf, l_aff, w)
    else:
        l_aff = l_airmf.new_zeros(())
        total = w.airmf * l_airmf
    return {"total": total, "airmf": l_airmf, "aff": l_aff, **parts}, out


def _set_frozen(model, freeze):
    for prefix in freeze:
        sub = model.get_submodule(prefix)
        sub.eval()
        for p in sub.parameters():
            p.requires_grad_(False)


def train(cfg, dataset_root=None, scenes=None, log_path=None, init_params=None, freeze=(),
          dump_dir=None, callback=None):
    """Train a RefinementNet; returns the final Checkpoint.

    Scenes come from ``scenes``, else ``<dataset_root>/train``, else are
    synthesised from ``cfg``. ``init_params`` (name -> array) overrides the
    seeded initialisation for the names it contains; modules named in
    ``freeze`` are kept in eval mode with gradients disabled.
    """
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    if scenes is None:
        if dataset_root is not None:
            scenes = [s for _, s, _ in load_split(dataset_root, "train")]
        else:
            scenes = make_scenes(cfg)
    if not scenes and cfg.total_iters > 0:
        raise ParameterError("no training scenes")

    model = build_model(cfg)
    if init_params:
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in init_params.items()},
                              strict=False)
    _set_frozen(model, freeze)
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)

    history = []
    log_fh = writer = None
    if log_path:
        new = not os.path.exists(log_path) or os.path.getsize(log_path) == 0
        log_fh = open(log_path, "a", newline="")
        writer = csv.writer(log_fh)
        if new:
            writer.writerow(LOG_HEADER)
    try:
        for it in range(cfg.total_iters):
            model.train()
            _set_frozen(model, freeze)
            lr = lr_at(it, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            x, gt, grids, batch_seed = sample_batch(scenes, cfg, it)
            losses, _ = compute_losses(model, x, gt, grids, cfg, pair_seed=batch_seed)
            if not torch.isfinite(losses["total"]):
                _dump_failure(dump_dir, it, batch_seed, losses)
                raise NumericalError(f"non-finite loss at iteration {it} (batch seed {batch_seed})",
                                     iteration=it, batch_seed=batch_seed)
            opt.zero_grad(set_to_none=True)
            losses["total"].backward()
            opt.step()
            row = [it] + [losses[k].item() for k in ("total", "airmf", "aff")] + [lr]
            history.append(row)
            if writer:
                writer.writerow([row[0]] + [f"{v:.8g}" for v in row[1:]])
            if callback:
                callback(it, model, losses)
    finally:
        if log_fh:
            log_fh.close()

    model.eval()
    ckpt = Checkpoint(params=model_state(model), iteration=cfg.total_iters, config=cfg.to_dict())
    ckpt.history = history
    return ckpt


def _dump_failure(dump_dir, iteration, batch_seed, losses):
    if not dump_dir:
        return
    os.makedirs(dump_dir, exist_ok=True)
    with open(os.path.join(dump_dir, "nan_dump.json"), "w") as fh:
        json.dump({"iteration": iteration, "batch_seed": batch_seed,
                   "losses": {k: float(v.detach()) for k, v in losses.items()}}, fh, indent=1)
