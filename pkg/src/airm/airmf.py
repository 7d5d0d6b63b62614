"""Implicit mask decoding with shared or hypernetwork-predicted mapping functions.

The mapping function f is a small MLP taking ``concat(z_p, p - q)`` (latent
code of a grid cell and its offset to the query, in cell units) to a logit.
Its weights are either shared across all images (``SharedMapping``) or
emitted per image by ``HyperNetwork`` as low-rank factors ``W = A @ B``.
Four neighbouring cells are blended with area weights (local ensemble).
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeError

DEFAULT_RANK = 20


def layer_dims(in_dim, hidden, n_layers=5, out_dim=1):
    """[(n_in, n_out), ...] for an ``n_layers`` perceptron."""
    sizes = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
    return list(zip(sizes[:-1], sizes[1:]))


def param_count(dims, rank=None):
    """Parameters per layer: factored (A, B, b) if ``rank`` is given, else full (W, b)."""
    if rank is None:
        return [n_in * n_out + n_out for n_in, n_out in dims]
    return [n_out * rank + rank * n_in + n_out for n_in, n_out in dims]


def compose_weights(A, B):
    """W = A @ B for factors of shape (..., n_out, r) and (..., r, n_in)."""
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"inner dimensions disagree: {tuple(A.shape)} @ {tuple(B.shape)}")
    return A @ B


@dataclass
class ModulatedParams:
    """Per-image low-rank factors; every tensor carries a leading batch axis."""

    A: list
    B: list
    b: list
    rank: int

    def weights(self):
        return [compose_weights(a, b) for a, b in zip(self.A, self.B)]

    def biases(self):
        return list(self.b)

    def flatten(self):
        """(batch, P) concatenation of all A, B, b."""
        parts = []
        for a, b_, bias in zip(self.A, self.B, self.b):
            parts += [a.flatten(1), b_.flatten(1), bias.flatten(1)]
        return torch.cat(parts, dim=1)


class SharedMapping(nn.Module):
    """Full-rank MLP weights shared by every input."""

    def __init__(self, dims):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(n_in, n_out) for n_in, n_out in dims)

    def weights(self):
        return [layer.weight for layer in self.layers]

    def biases(self):
        return [layer.bias for layer in self.layers]


class HyperNetwork(nn.Module):
    """Conv+ReLU+BatchNorm tower, global average pool, then one linear head
    emitting every A, B and b of the mapping function."""

    def __init__(self, feat_dim, dims, rank=DEFAULT_RANK, width=64, n_conv=2, mod_scale=0.3):
        super().__init__()
        self.feat_dim = feat_dim
        self.dims = list(dims)
        self.rank = rank
        layers, ch = [], feat_dim
        for _ in range(n_conv):
            layers += [nn.Conv2d(ch, width, 3, padding=1), nn.ReLU(), nn.BatchNorm2d(width)]
            ch = width
        self.tower = nn.Sequential(*layers)
        self.sizes = []
        for n_in, n_out in self.dims:
            self.sizes += [n_out * rank, rank * n_in, n_out]
        self.head = nn.Linear(width, sum(self.sizes))
        # The pooled code is scaled in forward() rather than only at init so the
        # image-dependent part moves (and back-propagates) on the same scale as the base.
        self.mod_gain = mod_scale / math.sqrt(width)
        self._init_head()

    @torch.no_grad()
    def _init_head(self):
        # Bias = a He-initialised low-rank MLP; weight = image-dependent modulation.
        stds = []
        for l, (n_in, n_out) in enumerate(self.dims):
            gain = 2.0 if l < len(self.dims) - 1 else 1.0
            stds += [math.sqrt(1.0 / self.rank), math.sqrt(gain / n_in), 0.0]
        bias_chunks, weight_chunks = [], []
        for size, std in zip(self.sizes, stds):
            bias_chunks.append(torch.randn(size) * std)
            weight_chunks.append(torch.randn(size, self.head.in_features) * std)
        self.head.bias.copy_(torch.cat(bias_chunks))
        self.head.weight.copy_(torch.cat(weight_chunks))

    def forward(self, feat):
        if feat.ndim != 4 or feat.shape[1] != self.feat_dim:
            raise ShapeError(f"expected feature grid (B, {self.feat_dim}, h, w), got {tuple(feat.shape)}")
        g = self.tower(feat).mean(dim=(2, 3))
        flat = self.head(g * self.mod_gain)
        chunks = torch.split(flat, self.sizes, dim=1)
        A, B, b = [], [], []
        n = flat.shape[0]
        for l, (n_in, n_out) in enumerate(self.dims):
            a_, b_, bias = chunks[3 * l: 3 * l + 3]
            A.append(a_.reshape(n, n_out, self.rank))
            B.append(b_.reshape(n, self.rank, n_in))
            b.append(bias)
        return ModulatedParams(A=A, B=B, b=b, rank=self.rank)


def mlp_forward(x, weights, biases):
    """Run the mapping MLP; ReLU between layers, raw logit out.

    ``x`` is (batch, Q, n_in). Weights are (n_out, n_in) when shared or
    (batch, n_out, n_in) when predicted per image.
    """
    last = len(weights) - 1
    for l, (W, b) in enumerate(zip(weights, biases)):
        if W.ndim == 3:
            x = torch.baddbmm(b.unsqueeze(-2), x, W.transpose(-1, -2))
        else:
            x = torch.addmm(b, x.reshape(-1, x.shape[-1]), W.t()).reshape(*x.shape[:-1], -1)
        if l < last:
            x = torch.relu_(x)
    return x


def map_point(params, z, offset):
    """f(z_p, p - q) -> logit for (batch, Q, D) codes and (batch, Q, 2) offsets."""
    return mlp_forward(torch.cat([z, offset], dim=-1), params.weights(), params.biases())[..., 0]


def ensemble_weights(coords, h, w):
    """Neighbour indices, offsets and normalized area weights for each query.

    ``coords`` is (batch, Q, 2) holding (x, y) in [-1, 1]. Returns
    ``idx`` (batch, Q, 4) flat cell indices, ``offset`` (batch, Q, 4, 2)
    cell-centre minus query in cell units, and ``weight`` (batch, Q, 4)
    summing to one. Each neighbour is weighted by the area of the rectangle
    spanned by the query and the diagonally opposite cell centre; indices
    outside the grid are clamped to the border.
    """
    u = (coords[..., 0] + 1) * 0.5 * w - 0.5
    v = (coords[..., 1] + 1) * 0.5 * h - 0.5
    x0, y0 = torch.floor(u), torch.floor(v)
    idx, offs, areas = [], [], []
    for cy in (y0, y0 + 1):
        for cx in (x0, x0 + 1):
            cxc = cx.clamp(0, w - 1)
            cyc = cy.clamp(0, h - 1)
            off = torch.stack([cxc - u, cyc - v], dim=-1)
            idx.append((cyc * w + cxc).long())
            offs.append(off)
            areas.append((off[..., 0] * off[..., 1]).abs())
    areas = areas[::-1]  # diagonal swap: TL<->BR, TR<->BL
    area = torch.stack(areas, dim=-1)
    total = area.sum(dim=-1, keepdim=True)
    safe = torch.where(total > 0, total, torch.ones_like(total))
    weight = torch.where(total > 0, area / safe, torch.full_like(area, 0.25))
    return torch.stack(idx, dim=-1), torch.stack(offs, dim=-2), weight


def local_ensemble_decode(feat, params, coords, return_logits=False):
    """Soft mask values in (0, 1) at continuous query coordinates.

    ``feat`` (batch, D, h, w); ``coords`` (batch, Q, 2) as (x, y) in [-1, 1].
    """
    n, D, h, w = feat.shape
    Q = coords.shape[1]
    if Q == 0:
        return feat.new_zeros((n, 0))
    idx, offset, weight = ensemble_weights(coords.to(feat.dtype), h, w)
    z = feat.flatten(2).transpose(1, 2)  # (n, hw, D)
    z = torch.gather(z, 1, idx.reshape(n, Q * 4, 1).expand(-1, -1, D))
    logits = map_point(params, z, offset.reshape(n, Q * 4, 2)).reshape(n, Q, 4)
    logit = (weight * logits).sum(dim=-1)
    return logit if return_logits else torch.sigmoid(logit)


def make_grid_coords(out_res, batch=1, dtype=torch.float32):
    """Pixel-centre (x, y) coordinates of an (H', W') raster, (batch, H'*W', 2)."""
    H, W = out_res
    ys = -1 + (2 * torch.arange(H, dtype=dtype) + 1) / H
    xs = -1 + (2 * torch.arange(W, dtype=dtype) + 1) / W
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([xx, yy], dim=-1).reshape(1, H * W, 2)
    return coords.expand(batch, -1, -1)


def decode_grid(feat, params, out_res, chunk=16384, return_logits=False):
    """Decode a (batch, H', W') soft mask at an arbitrary output resolution."""
    H, W = out_res
    coords = make_grid_coords(out_res, feat.shape[0], feat.dtype)
    if coords.shape[1] <= chunk:
        out = local_ensemble_decode(feat, params, coords, return_logits)
    else:
        out = torch.cat([local_ensemble_decode(feat, params, coords[:, i:i + chunk], return_logits)
                         for i in range(0, coords.shape[1], chunk)], dim=1)
    return out.reshape(feat.shape[0], H, W)
