"""Synthetic scenes and coarse masks
=====================================

Every scene is a textured background with one or more filled shapes. The
ground-truth mask marks the shapes; a coarse mask is a smooth random
deformation of it whose IoU against the ground truth lands inside a
requested band.
"""

# %%
import tempfile

import numpy as np

from airm.datagen import CATEGORIES, generate_dataset, generate_scene, load_split, perturb_mask
from airm.metrics import iou

print("shape categories:", ", ".join(CATEGORIES))

# %%
# One scene: the same seed always gives the same pixels.
scene = generate_scene(seed=7, size=(64, 64), n_shapes=2)
print("image", scene.image.shape, scene.image.dtype, "mask", scene.gt_mask.shape)
print("category of the first shape:", scene.category_name)
assert np.array_equal(scene.image, generate_scene(7, (64, 64), 2).image)

# %%
# Coarse masks for a few IoU bands.
for band in [(0.6, 0.7), (0.8, 0.9), (0.9, 1.0)]:
    coarse = perturb_mask(scene.gt_mask, band, seed=1)
    print(f"band {band}: coarse IoU {iou(coarse.mask, scene.gt_mask):.3f}")

# %%
# A small on-disk split with a manifest that the refine command can read.
with tempfile.TemporaryDirectory() as root:
    generate_dataset(root, "test", 4, size=(48, 48), seed=3)
    print(open(f"{root}/test/manifest.tsv").read().strip())
    print("loaded", len(load_split(root, "test")), "scenes back")
