"""Encoder + mapping function + affinity predictor, assembled from a config."""

import torch
from torch import nn

from .airmf import HyperNetwork, SharedMapping, decode_grid, layer_dims, local_ensemble_decode
from .encoder import AffinityEmpoweredEncoder, AffinityHead, CNNEncoder, cnn_affinity
from .errors import ParameterError


class RefinementNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.encoder_kind = cfg.encoder
        self.mapping_kind = cfg.mapping
        if cfg.encoder == "aee":
            self.encoder = AffinityEmpoweredEncoder(
                dims=cfg.aee_dims, depths=cfg.aee_depths, heads=cfg.aee_heads, out_dim=cfg.feat_dim)
            self.affinity_head = AffinityHead(self.encoder.att_channels)
        elif cfg.encoder == "cnn":
            self.encoder = CNNEncoder(cfg.cnn_kernel, cfg.cnn_depth, stride=4, out_dim=cfg.feat_dim)
            self.affinity_head = None
        else:
            raise ParameterError(f"unknown encoder {cfg.encoder!r}")
        dims = layer_dims(cfg.feat_dim + 2, cfg.hidden, cfg.n_layers)
        if cfg.mapping == "airmf":
            self.mapping = HyperNetwork(cfg.feat_dim, dims, rank=cfg.rank,
                                        width=cfg.hyper_width, n_conv=cfg.hyper_convs)
        elif cfg.mapping == "sirmf":
            self.mapping = SharedMapping(dims)
        else:
            raise ParameterError(f"unknown mapping {cfg.mapping!r}")
        self.stride = self.encoder.stride

    def encode(self, x, need_att=False):
        return self.encoder(x, need_att=need_att and self.encoder_kind == "aee")

    def mapping_params(self, feat):
        return self.mapping(feat) if self.mapping_kind == "airmf" else self.mapping

    def affinity(self, feat, att):
        if self.affinity_head is not None:
            return self.affinity_head(att)
        return cnn_affinity(feat)

    def forward(self, x, out_res=None, coords=None, need_affinity=False):
        """Returns a dict with ``feat``, ``params``, ``mask`` and, on request, ``aff``."""
        feat, att = self.encode(x, need_att=need_affinity)
        params = self.mapping_params(feat)
        if coords is not None:
            mask = local_ensemble_decode(feat, params, coords)
        else:
            mask = decode_grid(feat, params, out_res or tuple(x.shape[-2:]))
        out = {"feat": feat, "params": params, "mask": mask}
        if need_affinity:
            out["aff"] = self.affinity(feat, att)
        return out


@torch.no_grad()
def predict(model, x, out_res):
    """Eval-mode soft mask (batch, H', W') for a packed (batch, 4, H, W) input."""
    was_training = model.training
    model.eval()
    try:
        return model(x, out_res=out_res)["mask"]
    finally:
        model.train(was_training)
