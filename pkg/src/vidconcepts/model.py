"""The full concept model: backbone, projections, prototypes, heads, attention."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .bottleneck import ReconstructionHead
from .conceptspace import PrototypeBank, compute_code
from .encoder import EncoderConfig, Projection, Tiny3DEncoder, encode
from .errors import InvalidInputError
from .localcontrast import CrossAttention

SOURCES = ("s", "d", "v")


@dataclass
class ModelOutput:
    fmaps: dict
    vecs: dict
    codes: dict
    local: dict
    weights: dict

    @property
    def grid(self):
        return tuple(self.fmaps["v"].shape[2:])


class ConceptModel(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig, k_static, k_dynamic, head_hidden=None,
                 backbone_factory=None):
        super().__init__()
        enc_cfg.validate()
        self.enc_cfg = enc_cfg
        self.k_static, self.k_dynamic = int(k_static), int(k_dynamic)
        C = enc_cfg.out_channels
        make = backbone_factory or Tiny3DEncoder
        if enc_cfg.variant == "pluggable" and backbone_factory is None:
            raise InvalidInputError("pluggable encoder variant needs a backbone_factory")
        if enc_cfg.shared_backbone:
            self.backbone = make(enc_cfg)
        else:
            self.backbones = nn.ModuleDict({k: make(enc_cfg) for k in SOURCES})
        self.sigmas = nn.ModuleDict({k: Projection(C, enc_cfg.sigma) for k in SOURCES})
        self.prototypes = PrototypeBank(k_static, k_dynamic, C)
        sizes = {"s": k_static, "d": k_dynamic, "v": k_static + k_dynamic}
        self.heads = nn.ModuleDict({k: ReconstructionHead(sizes[k], C, head_hidden)
                                    for k in SOURCES})
        self.attention = CrossAttention(C)

    @property
    def dim(self):
        return self.enc_cfg.out_channels

    def backbone_for(self, source):
        if self.enc_cfg.shared_backbone:
            return self.backbone
        return self.backbones[source]

    def encode_all(self, v, s, d):
        # one backbone call per stream, so batch statistics never mix streams
        fmaps, vecs = {}, {}
        for k, x in zip(("v", "s", "d"), (v, s, d)):
            fmaps[k], vecs[k] = encode(x, self.backbone_for(k))
        return fmaps, vecs

    def codes_from(self, vecs):
        return {k: compute_code(self.sigmas[k](vecs[k]), self.prototypes[k]) for k in vecs}

    def forward(self, v, s, d, with_local=True):
        fmaps, vecs = self.encode_all(v, s, d)
        codes = self.codes_from(vecs)
        local, weights = {}, {}
        if with_local:
            for k in SOURCES:
                local[k], weights[k] = self.attention(self.prototypes[k], fmaps[k])
        return ModelOutput(fmaps, vecs, codes, local, weights)

    def encode_clip(self, v, with_local=True):
        """Video branch only, for evaluation."""
        fmap, vec = encode(v, self.backbone_for("v"))
        fmaps, vecs = {"v": fmap}, {"v": vec}
        codes = self.codes_from(vecs)
        local, weights = {}, {}
        if with_local:
            local["v"], weights["v"] = self.attention(self.prototypes["v"], fmap)
        return ModelOutput(fmaps, vecs, codes, local, weights)


def build_model(cfg, seed=0):
    """Build a model from an ``ExperimentConfig`` with seeded initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ConceptModel(cfg.encoder, cfg.conceptspace.K_s, cfg.conceptspace.K_d,
                            cfg.bottleneck.hidden)
