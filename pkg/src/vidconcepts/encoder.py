"""Shared 3D-conv backbone, global pooling and the per-source projections."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .errors import InvalidInputError


@dataclass
class EncoderConfig:
    widths: list = field(default_factory=lambda: [16, 32, 64, 128])
    temporal_strides: list = field(default_factory=lambda: [1, 2, 2, 1])
    spatial_strides: list = field(default_factory=lambda: [4, 2, 2, 1])
    in_channels: int = 3
    norm: str = "batch"  # batch | group | none
    variant: str = "tiny3dconv"  # tiny3dconv | pluggable
    shared_backbone: bool = True
    sigma: str = "identity"  # identity | mlp
    stem_kernel_t: int = 3  # temporal extent of the patchify kernel (odd)

    @property
    def out_channels(self):
        return int(self.widths[-1])

    @property
    def total_strides(self):
        return int(np.prod(self.temporal_strides)), int(np.prod(self.spatial_strides))

    def validate(self):
        n = len(self.widths)
        if n == 0 or len(self.temporal_strides) != n or len(self.spatial_strides) != n:
            raise InvalidInputError("widths and stride lists must have equal, nonzero length")
        if self.out_channels < 8:
            raise InvalidInputError(f"output channels must be >= 8, got {self.out_channels}")
        if self.norm not in ("group", "batch", "none"):
            raise InvalidInputError(f"unknown norm {self.norm!r}")
        if self.variant not in ("tiny3dconv", "pluggable"):
            raise InvalidInputError(f"unknown encoder variant {self.variant!r}")
        if self.sigma not in ("identity", "mlp"):
            raise InvalidInputError(f"unknown sigma {self.sigma!r}")
        if self.stem_kernel_t < 1 or self.stem_kernel_t % 2 == 0:
            raise InvalidInputError(f"stem_kernel_t must be odd and >= 1, got {self.stem_kernel_t}")
        if min(self.temporal_strides + self.spatial_strides) < 1:
            raise InvalidInputError("strides must be >= 1")
        return self

    def output_shape(self, T, H, W):
        st, ss = self.total_strides
        if T % st or H % ss or W % ss:
            raise InvalidInputError(
                f"input extents ({T}, {H}, {W}) not divisible by strides ({st}, {ss}, {ss})")
        return self.out_channels, T // st, H // ss, W // ss

    def to_dict(self):
        return asdict(self)


class FixedScale(nn.Module):
    """Constant multiplier; keeps pooled features near unit norm."""

    def __init__(self, factor):
        super().__init__()
        self.factor = float(factor)

    def forward(self, x):
        return x * self.factor

    def extra_repr(self):
        return f"factor={self.factor:.4g}"


def _stage(cin, cout, st, ss, norm, act, kt=1):
    if ss > 2:
        # patchify: non-overlapping spatial windows, kt frames of temporal context
        kt = max(kt, st + (st + 1) % 2)
        conv = nn.Conv3d(cin, cout, (kt, ss, ss), (st, ss, ss), ((kt - st + 1) // 2, 0, 0))
    else:
        conv = nn.Conv3d(cin, cout, 3, (st, ss, ss), 1)
    layers = [conv]
    # the last stage has no learnable scale: the pooled feature scale stays fixed
    if norm == "group":
        layers.append(nn.GroupNorm(min(8, cout), cout, affine=act))
    elif norm == "batch":
        layers.append(nn.BatchNorm3d(cout, affine=act))
    if act:
        layers.append(nn.ReLU())
    elif norm != "none":
        layers.append(FixedScale(cout ** -0.5))
    return nn.Sequential(*layers)


class Tiny3DEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        chans = [cfg.in_channels] + list(cfg.widths)
        n = len(cfg.widths)
        self.stages = nn.Sequential(*[
            _stage(chans[i], chans[i + 1], cfg.temporal_strides[i], cfg.spatial_strides[i],
                   cfg.norm, act=i < n - 1, kt=cfg.stem_kernel_t)
            for i in range(n)
        ])

    def forward(self, x):
        return self.stages(x)


def global_average_pool(fmap):
    """Mean over every spatio-temporal position, per channel: [B, C, ...] -> [B, C]."""
    return fmap.flatten(2).mean(dim=2)


def as_batch(x, dtype=None):
    """Accept a single clip ``[T, H, W, Ch]`` (array) or a batch ``[B, Ch, T, H, W]``."""
    if isinstance(x, np.ndarray):
        if x.ndim == 4:
            x = x[None]
        if x.ndim != 5:
            raise InvalidInputError(f"expected [T,H,W,Ch] or [B,T,H,W,Ch], got {x.shape}")
        x = torch.from_numpy(np.ascontiguousarray(x)).permute(0, 4, 1, 2, 3)
    if x.ndim != 5:
        raise InvalidInputError(f"expected a 5-D batch, got shape {tuple(x.shape)}")
    return x.to(dtype) if dtype is not None else x


def encode(x, backbone):
    """Run ``backbone`` and return (feature map ``[B,C,T',H',W']``, pooled ``[B,C]``)."""
    x = as_batch(x, next(backbone.parameters()).dtype)
    cfg = getattr(backbone, "cfg", None)
    if cfg is not None:
        if x.shape[1] != cfg.in_channels:
            raise InvalidInputError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        cfg.output_shape(*x.shape[2:])
    fmap = backbone(x)
    return fmap, global_average_pool(fmap)


class Projection(nn.Module):
    """sigma: identity by default, or a two-layer MLP."""

    def __init__(self, dim, kind="identity"):
        super().__init__()
        self.kind = kind
        if kind == "mlp":
            self.fc1 = nn.Linear(dim, dim)
            self.fc2 = nn.Linear(dim, dim)
        elif kind != "identity":
            raise InvalidInputError(f"unknown projection {kind!r}")

    def forward(self, x):
        if self.kind == "identity":
            return x
        return self.fc2(torch.relu(self.fc1(x)))


def project(sigmas, source, vec):
    return sigmas[source](vec)
