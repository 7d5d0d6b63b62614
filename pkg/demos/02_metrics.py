"""IoU and boundary accuracy
============================

IoU rewards overall overlap. Boundary accuracy (mBA) only looks at pixels
in bands around the ground-truth edge and averages the band accuracy over
several radii, so it reacts to edge errors that barely move IoU.
"""

# %%
import numpy as np

from airm.metrics import boundary_band, evaluate, iou, mba

gt = np.zeros((64, 64), bool)
gt[16:48, 16:48] = True

# %%
# Shift the square by one pixel: IoU stays high, boundary accuracy drops more.
shifted = np.roll(gt, 1, axis=1)
print(f"one-pixel shift: IoU {iou(shifted, gt):.3f}, mBA {mba(shifted, gt)[0]:.3f}")

# Eroded interior: a blob that misses the whole rim.
eroded = np.zeros_like(gt)
eroded[19:45, 19:45] = True
print(f"three-pixel erosion: IoU {iou(eroded, gt):.3f}, mBA {mba(eroded, gt)[0]:.3f}")

# %%
# The band at radius r holds pixels within Chebyshev distance r of an edge pixel.
for r in (1, 3, 5):
    print(f"radius {r}: band covers {int(boundary_band(gt, r).sum())} pixels")

# %%
# A full report for one prediction, as written by the eval command.
report = evaluate(shifted.astype(np.float32), gt.astype(np.float32), name="shifted")
print(report)
