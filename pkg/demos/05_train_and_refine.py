"""Training a small model and refining masks
=============================================

A few hundred iterations on a reduced architecture are enough to see the
loss fall. The desk-scale configuration (TrainConfig() defaults) trains for
2000 iterations, takes a few minutes on one CPU core, and is what the
acceptance suite uses. Pass --desk to run it here instead.
"""

# %%
import sys
import tempfile

import numpy as np

from airm import TrainConfig, load_checkpoint, refine, save_checkpoint, train
from airm.datagen import generate_scene, perturb_mask
from airm.metrics import iou, mba

if "--desk" in sys.argv:
    cfg = TrainConfig()
else:
    cfg = TrainConfig(total_iters=300, decay_iters=(200,), n_scenes=16, scene_size=(48, 48),
                      crop=(32, 32), aee_dims=(16, 32), feat_dim=16, hidden=32, hyper_width=16)
print(cfg.to_text())

# %%
ckpt = train(cfg)
hist = np.array(ckpt.history)
print(f"mask loss: first 20 iters {hist[:20, 2].mean():.4f}, last 20 iters {hist[-20:, 2].mean():.4f}")

# %%
# Checkpoints are plain zip archives of .npy arrays plus a manifest.
with tempfile.TemporaryDirectory() as tmp:
    save_checkpoint(ckpt, f"{tmp}/model.ckpt")
    ckpt = load_checkpoint(f"{tmp}/model.ckpt")

# %%
# Refine held-out coarse masks and score both against the ground truth.
before, after = [], []
for i in range(6):
    s = generate_scene(1000 + i, (64, 64), 1 + i % 2)
    coarse = perturb_mask(s.gt_mask, (0.8, 0.9), seed=i).mask
    out = refine(s.image, coarse, ckpt, ratios=[1.0])
    before.append((iou(coarse, s.gt_mask), mba(coarse, s.gt_mask)[0]))
    after.append((iou(out, s.gt_mask), mba(out, s.gt_mask)[0]))
b, a = np.mean(before, axis=0), np.mean(after, axis=0)
print(f"coarse  IoU {b[0]:.3f}  mBA {b[1]:.3f}")
print(f"refined IoU {a[0]:.3f}  mBA {a[1]:.3f}")

# %%
# Coarse-to-fine refinement on a larger scene returns a mask at input resolution.
big = generate_scene(5, (256, 256), 2)
coarse = perturb_mask(big.gt_mask, (0.8, 0.9), seed=5).mask
out = refine(big.image, coarse, ckpt, ratios=[0.125, 0.25, 0.5, 1.0])
print("256x256 refined mask:", out.shape, f"IoU {iou(out, big.gt_mask):.3f}")
