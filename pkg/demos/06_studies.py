"""Desk-scale studies
=====================

Each study trains one model per arm and scores it on a fixed held-out set.
Results are cached by config hash, so rerunning a study only re-reads the
cache. The tiny config below keeps the whole script under a minute; the
`airm ablate` command runs the same studies with the desk defaults.
"""

# %%
import tempfile

from airm.experiments import ArmCache, EvalSet, run_study
from airm.trainer import TrainConfig

cfg = TrainConfig(total_iters=40, decay_iters=(), n_scenes=8, scene_size=(48, 48), crop=(32, 32),
                  aee_dims=(16, 32), feat_dim=16, hidden=32, hyper_width=16, cnn_depth=2)
eval_set = EvalSet(n=4, size=(32, 32))
cache = ArmCache(tempfile.mkdtemp(prefix="airm-demo-"))


def show(rows):
    for r in rows:
        print("  " + ", ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}"
                               for k, v in r.items() if k != "per_scene_iou"))


# %%
print("affinity radius sweep")
show(run_study("radius", ["1", "3"], cfg, cache=cache, eval_set=eval_set))

# %%
print("receptive field of the CNN encoder")
show(run_study("rf", ["1", "3"], cfg, cache=cache, eval_set=eval_set))

# %%
print("component ablation")
show(run_study("component", ["aee+aff+airmf", "aee+aff", "cnn+airmf"], cfg, cache=cache,
               eval_set=eval_set))

# %%
print("loss terms")
show(run_study("loss", ["l1", "l1+grad"], cfg, cache=cache, eval_set=eval_set))

# %%
print("second run of the radius sweep (served from the cache)")
show(run_study("radius", ["1", "3"], cfg, cache=cache, eval_set=eval_set))
