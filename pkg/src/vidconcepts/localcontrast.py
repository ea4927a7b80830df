"""Prototype-queried cross-attention over feature maps and the local concept
margin contrast.

The squared hinge ``max(lambda - dist, 0)**2`` is continuously differentiable,
so its gradient at ``dist == lambda`` is 0 from both sides. At ``dist == 0``
the distance has no gradient; torch's norm returns the zero subgradient there.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InvalidInputError


@dataclass
class LocalContrastConfig:
    K_top: int = 5
    margin: float = 1.0

    def validate(self, k_static=None, k_dynamic=None):
        if self.K_top < 1:
            raise InvalidInputError(f"K_top must be >= 1, got {self.K_top}")
        if k_static is not None and self.K_top > min(k_static, k_dynamic):
            raise InvalidInputError(f"K_top={self.K_top} exceeds min(K_s, K_d)")
        if not self.margin > 0:
            raise InvalidInputError(f"margin must be positive, got {self.margin}")
        return self


class CrossAttention(nn.Module):
    """Single-head QKV attention with the projected query added back as residual."""

    def __init__(self, dim, attn_dim=None):
        super().__init__()
        attn_dim = dim if attn_dim is None else attn_dim
        if attn_dim != dim:
            raise InvalidInputError("query residual needs attention dim == feature dim")
        self.dim, self.attn_dim = dim, attn_dim
        self.W_q = nn.Linear(dim, attn_dim, bias=False)
        self.W_k = nn.Linear(dim, attn_dim, bias=False)
        self.W_v = nn.Linear(dim, dim, bias=False)

    def forward(self, protos, fmap, return_logits=False):
        """protos [K, C], fmap [B, C, T', H', W'] -> features [B, K, C], weights [B, K, N]."""
        if fmap.ndim == 4:
            fmap = fmap.unsqueeze(0)
        if fmap.shape[1] != self.dim:
            raise InvalidInputError(f"feature map has {fmap.shape[1]} channels, expected {self.dim}")
        tokens = fmap.flatten(2).transpose(1, 2)  # [B, N, C]
        if tokens.shape[1] == 0:
            raise InvalidInputError("feature map has no positions")
        q = self.W_q(protos)  # [K, Ca]
        k = self.W_k(tokens)  # [B, N, Ca]
        v = self.W_v(tokens)  # [B, N, C]
        logits = torch.einsum("kc,bnc->bkn", q, k) / math.sqrt(self.attn_dim)
        weights = torch.softmax(logits, dim=-1)
        out = weights @ v + q.unsqueeze(0)
        if return_logits:
            return out, weights, logits
        return out, weights


def cross_attend(protos, fmap, attn: CrossAttention):
    return attn(protos, fmap)


def topk_mask(q, k):
    """Boolean mask of the ``k`` largest entries along the last axis; ties go to
    the lower index."""
    if k > q.shape[-1]:
        raise InvalidInputError(f"K_top={k} exceeds code length {q.shape[-1]}")
    order = torch.sort(-q.detach(), dim=-1, stable=True).indices[..., :k]
    mask = torch.zeros(q.shape, dtype=torch.bool, device=q.device)
    return mask.scatter(-1, order, True)


def select_valid(q_a, q_b, K_top):
    """Sorted indexes present in both top-``K_top`` sets of two 1-D codes."""
    q_a, q_b = torch.as_tensor(q_a), torch.as_tensor(q_b)
    if q_a.shape != q_b.shape:
        raise InvalidInputError(f"code shapes differ: {tuple(q_a.shape)} vs {tuple(q_b.shape)}")
    mask = topk_mask(q_a, K_top) & topk_mask(q_b, K_top)
    return [int(i) for i in torch.nonzero(mask).flatten()]


def local_margin_loss(F_a, F_b, idx, negatives, margin):
    """Margin contrast for one sample: pull ``F_a[k]`` to ``F_b[k]`` and push it
    at least ``margin`` away from ``n[k]`` for every negative set ``n``."""
    total = F_a.new_zeros(())
    for k in idx:
        total = total + ((F_a[k] - F_b[k]) ** 2).sum()
        for neg in negatives:
            dist = torch.linalg.vector_norm(F_a[k] - neg[k])
            total = total + torch.clamp(margin - dist, min=0) ** 2
    return total


def pair_loss(F_a, F_b, mask, margin):
    """Batched ``local_margin_loss``: negatives of sample i are ``F_b[j], j != i``.

    F_a, F_b: [B, K, C]; mask: [B, K] valid concepts. Returns per-sample [B].
    """
    B = F_a.shape[0]
    pos = ((F_a - F_b) ** 2).sum(-1)  # [B, K]
    a, b = F_a.transpose(0, 1), F_b.transpose(0, 1)  # [K, B, C]
    dist = torch.cdist(a, b, compute_mode="donot_use_mm_for_euclid_dist")  # [K, B, B]
    hinge = torch.clamp(margin - dist, min=0) ** 2
    off_diag = ~torch.eye(B, dtype=torch.bool, device=F_a.device)
    neg = (hinge * off_diag).sum(-1).transpose(0, 1)  # [B, K]
    return ((pos + neg) * mask).sum(-1)


def valid_masks(q_s, q_d, q_v, k_static, K_top):
    q_vs, q_vd = q_v[..., :k_static], q_v[..., k_static:]
    return (topk_mask(q_s, K_top) & topk_mask(q_vs, K_top),
            topk_mask(q_d, K_top) & topk_mask(q_vd, K_top))


def local_loss_total(F_s, F_v, F_d, q_s, q_v, q_d, k_static, cfg: LocalContrastConfig,
                     masks=None):
    """Batch mean of the four directed margin losses (static pair both ways,
    dynamic pair both ways). ``masks`` overrides the top-k selection."""
    if masks is None:
        masks = valid_masks(q_s, q_d, q_v, k_static, cfg.K_top)
    m_s, m_d = masks
    F_vs, F_vd = F_v[:, :k_static], F_v[:, k_static:]
    per_sample = (pair_loss(F_s, F_vs, m_s, cfg.margin) + pair_loss(F_vs, F_s, m_s, cfg.margin)
                  + pair_loss(F_d, F_vd, m_d, cfg.margin) + pair_loss(F_vd, F_d, m_d, cfg.margin))
    return per_sample.mean()


def attention_maps(weights, grid):
    """Reshape attention weights [B, K, N] to [B, K, T', H', W'] as numpy."""
    w = weights.detach().cpu().numpy()
    return w.reshape(w.shape[:2] + tuple(grid))


def top_concept(code):
    return int(np.argmax(np.asarray(code)))
