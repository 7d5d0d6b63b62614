"""Image encoders.

``AffinityEmpoweredEncoder`` is a two-stage Mix-Transformer-style encoder that
also returns the attention matrices of its final stage. ``CNNEncoder`` is the
plain Conv+ReLU+BatchNorm stack used for the receptive-field study and as the
convolutional ablation arm. Both map an (image, coarse mask) pair to a
feature grid of shape (B, D, H/stride, W/stride).
"""

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ParameterError, ShapeError


def pack_input(image, coarse, dtype=torch.float32):
    """(H, W, 3) image + (H, W[, 1]) mask as numpy -> (1, 4, H, W) tensor."""
    image = np.asarray(image, dtype=np.float32)
    coarse = np.asarray(coarse, dtype=np.float32)
    if coarse.ndim == 2:
        coarse = coarse[..., None]
    if image.shape[:2] != coarse.shape[:2]:
        raise ShapeError(f"image {image.shape[:2]} and mask {coarse.shape[:2]} differ in size")
    x = np.concatenate([image, coarse], axis=-1).transpose(2, 0, 1)[None]
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def _check_divisible(x, stride):
    H, W = x.shape[-2:]
    if H % stride or W % stride:
        raise ShapeError(f"input size {H}x{W} is not divisible by encoder stride {stride}")


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_ch, dim, kernel_size, stride):
        super().__init__()
        if kernel_size <= stride:
            raise ParameterError("overlapped patch embedding needs kernel_size > stride")
        self.proj = nn.Conv2d(in_ch, dim, kernel_size, stride, padding=kernel_size // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.proj(x)
        B, C, H, W = x.shape
        return self.norm(x.flatten(2).transpose(1, 2)), H, W


class Attention(nn.Module):
    """Full multi-head self-attention that can hand back its probability maps."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ParameterError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, need_att=True):
        B, N, C = x.shape
        q, k, v = self.qkv(x).view(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        if need_att:
            att = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
            out = att @ v
        else:
            att = None
            out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(B, N, C)
        return self.proj(out), att


class MixFFN(nn.Module):
    """Feed-forward with a depthwise 3x3 conv standing in for position embeddings."""

    def __init__(self, dim, ratio=2):
        super().__init__()
        hidden = dim * ratio
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, H, W):
        x = self.fc1(x)
        B, N, C = x.shape
        x = self.dw(x.transpose(1, 2).reshape(B, C, H, W)).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, mlp_ratio)

    def forward(self, x, H, W, need_att=True):
        y, att = self.attn(self.norm1(x), need_att)
        x = x + y
        x = x + self.ffn(self.norm2(x), H, W)
        return x, att


class AffinityEmpoweredEncoder(nn.Module):
    """Two transformer stages at stride 4; attention of the last stage is exported.

    Returns ``(F, ATT)`` with F of shape (B, D, h, w) and ATT of shape
    (B, hw, hw, c) where c = blocks x heads of the final stage. Every ATT row
    is a softmax distribution per head.
    """

    stride = 4

    def __init__(self, in_ch=4, dims=(32, 64), depths=(2, 2), heads=(2, 2), out_dim=64, mlp_ratio=2):
        super().__init__()
        self.embed1 = OverlapPatchEmbed(in_ch, dims[0], kernel_size=7, stride=4)
        self.stage1 = nn.ModuleList(Block(dims[0], heads[0], mlp_ratio) for _ in range(depths[0]))
        self.norm1 = nn.LayerNorm(dims[0])
        self.embed2 = OverlapPatchEmbed(dims[0], dims[1], kernel_size=3, stride=1)
        self.stage2 = nn.ModuleList(Block(dims[1], heads[1], mlp_ratio) for _ in range(depths[1]))
        self.norm2 = nn.LayerNorm(dims[1])
        self.fuse = nn.Conv2d(dims[0] + dims[1], out_dim, 1)
        self.out_dim = out_dim
        self.att_channels = depths[1] * heads[1]

    def forward(self, x, need_att=True):
        _check_divisible(x, self.stride)
        B = x.shape[0]
        t, H, W = self.embed1(x)
        for blk in self.stage1:
            t, _ = blk(t, H, W, need_att=False)
        f1 = self.norm1(t).transpose(1, 2).reshape(B, -1, H, W)
        t, _, _ = self.embed2(f1)
        atts = []
        for blk in self.stage2:
            t, att = blk(t, H, W, need_att)
            atts.append(att)
        f2 = self.norm2(t).transpose(1, 2).reshape(B, -1, H, W)
        feat = self.fuse(torch.cat([f1, f2], dim=1))
        if not need_att:
            return feat, None
        # (B, heads, N, N) per block -> (B, N, N, blocks*heads)
        att = torch.cat(atts, dim=1).permute(0, 2, 3, 1)
        return feat, att


class AffinityHead(nn.Module):
    """Per-pair linear map of the symmetrised attention stack followed by a sigmoid.

    The stack is multiplied by the token count first so that uniform
    attention maps to 1 whatever the grid size.
    """

    def __init__(self, channels):
        super().__init__()
        self.fc = nn.Linear(channels, 1)

    def forward(self, att):
        if att.shape[-3] != att.shape[-2]:
            raise ShapeError(f"attention stack must be square, got {tuple(att.shape)}")
        sym = (att + att.transpose(-3, -2)) * att.shape[-2]
        return torch.sigmoid(self.fc(sym)).squeeze(-1)


def cnn_affinity(feat):
    """Affinity of CNN features as exp(-mean |z_i - z_j|) over channels; (B, hw, hw)."""
    z = feat.flatten(2).transpose(1, 2)
    return torch.exp(-torch.cdist(z, z, p=1) / z.shape[-1])


class CNNEncoder(nn.Module):
    """Space-to-depth by ``stride`` followed by ``depth`` Conv+ReLU+BatchNorm layers.

    The receptive field, in grid cells, is ``1 + depth * (kernel_size - 1)``.
    """

    def __init__(self, kernel_size=3, depth=4, stride=4, in_ch=4, out_dim=64):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ParameterError(f"kernel_size must be odd and >= 1, got {kernel_size}")
        if depth < 1:
            raise ParameterError("depth must be >= 1")
        self.stride = stride
        self.kernel_size = kernel_size
        self.depth = depth
        self.out_dim = out_dim
        layers = []
        ch = in_ch * stride * stride
        for _ in range(depth):
            layers += [nn.Conv2d(ch, out_dim, kernel_size, padding=kernel_size // 2),
                       nn.ReLU(),
                       nn.BatchNorm2d(out_dim)]
            ch = out_dim
        self.body = nn.Sequential(*layers)

    def forward(self, x, need_att=False):
        _check_divisible(x, self.stride)
        return self.body(F.pixel_unshuffle(x, self.stride)), None


def receptive_field_of(kernel_size, depth, stride=1):
    """Receptive field, in input pixels, of ``CNNEncoder(kernel_size, depth, stride)``."""
    return stride * (1 + depth * (kernel_size - 1))
