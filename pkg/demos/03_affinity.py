"""Pairwise affinity supervision
================================

The encoder is trained to predict whether two feature-grid cells belong to
the same region. Supervision comes from the ground-truth mask downsampled to
the grid: pairs within a window of radius R are split into same-label
(positive) and different-label (negative) sets, and each set contributes a
mean binary cross-entropy.
"""

# %%
import numpy as np
import torch

from airm.affinity import affinity_loss, build_gt_affinity, build_pair_set, grid_labels
from airm.encoder import AffinityEmpoweredEncoder, AffinityHead, pack_input
from airm.datagen import generate_scene, perturb_mask

scene = generate_scene(seed=11, size=(64, 64), n_shapes=1)
grid = grid_labels(scene.gt_mask[..., 0], 16, 16)
print("label grid (16x16):")
print("\n".join("".join("#" if v else "." for v in row) for row in grid))

# %%
pairs = build_pair_set(grid.astype(int), R=3)
print(f"R=3 window: {len(pairs.positives)} positive and {len(pairs.negatives)} negative pairs")
gt_aff = build_gt_affinity(scene.gt_mask[..., 0], 16, 16)
print("perfect prediction loss:", round(affinity_loss(np.clip(gt_aff, 1e-7, 1 - 1e-7), pairs), 6))
print("uninformed (0.5) loss:", round(affinity_loss(np.full_like(gt_aff, 0.5), pairs), 6))

# %%
# An untrained encoder already produces a symmetric affinity matrix from its attention.
torch.manual_seed(0)
enc = AffinityEmpoweredEncoder(dims=(16, 32), out_dim=16).eval()
head = AffinityHead(enc.att_channels)
coarse = perturb_mask(scene.gt_mask, (0.8, 0.9), seed=2).mask
with torch.no_grad():
    feat, att = enc(pack_input(scene.image, coarse))
    aff = head(att)[0]
print("features", tuple(feat.shape), "attention stack", tuple(att.shape))
print("max asymmetry:", float((aff - aff.T).abs().max()))
print("loss of the untrained head:", round(float(affinity_loss(aff.double(), pairs)), 4))
