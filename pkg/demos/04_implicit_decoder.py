"""Adaptive implicit decoding at any resolution
==============================================

A small MLP maps (feature vector, offset to the query) to a mask value.
With the adaptive mapping, a hypernetwork looks at the whole feature grid
and emits every weight matrix as a product of two rank-20 factors, so each
image gets its own decoder. Queries blend the four nearest cells with
area weights that always sum to one.
"""

# %%
import torch

from airm.airmf import (HyperNetwork, SharedMapping, decode_grid, ensemble_weights, layer_dims,
                        param_count)

D = 16
dims = layer_dims(D + 2, 64, n_layers=5)
print("layer shapes (in, out):", dims)
print("full-rank parameters:", param_count(dims), " rank-20 parameters:", param_count(dims, rank=20))

# %%
coords = torch.rand(1, 5, 2) * 2 - 1
idx, offset, weight = ensemble_weights(coords, 4, 4)
print("neighbour weights for 5 random queries:\n", weight[0])
print("row sums:", weight[0].sum(-1))

# %%
torch.manual_seed(0)
hyper = HyperNetwork(D, dims, rank=20, width=32).eval()
feat_a, feat_b = torch.randn(1, D, 8, 8), torch.randn(1, D, 8, 8)
with torch.no_grad():
    pa, pb = hyper(feat_a), hyper(feat_b)
    ranks = [int(torch.linalg.matrix_rank(W[0])) for W in pa.weights()]
    print("rank of each emitted weight matrix:", ranks)
    delta = (pa.weights()[1] - pb.weights()[1]).abs().mean()
    print(f"mean weight difference between two inputs: {float(delta):.4f}")

# %%
# The same latent grid decodes to any output size.
shared = SharedMapping(dims)
with torch.no_grad():
    for size in [(8, 8), (37, 53), (256, 256)]:
        print(size, "->", tuple(decode_grid(feat_a, hyper(feat_a), size).shape),
              "| shared mapping:", tuple(decode_grid(feat_a, shared, size).shape))
