"""Concept prototypes, cosine concept codes, Sinkhorn soft codes and the
swapped static/dynamic alignment loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import DegenerateInputError, InvalidInputError


@dataclass
class AlignmentConfig:
    tau: float = 0.1
    sinkhorn_iters: int = 3
    sinkhorn_eps: float = 0.05

    def validate(self):
        if not self.tau > 0:
            raise InvalidInputError(f"tau must be positive, got {self.tau}")
        if self.sinkhorn_iters < 1:
            raise InvalidInputError(f"sinkhorn_iters must be >= 1, got {self.sinkhorn_iters}")
        if not self.sinkhorn_eps > 0:
            raise InvalidInputError(f"sinkhorn_eps must be positive, got {self.sinkhorn_eps}")
        return self


def init_prototypes(k, dim, generator=None):
    w = torch.randn(k, dim, generator=generator) / math.sqrt(dim)
    return w / w.norm(dim=1, keepdim=True)


class PrototypeBank(nn.Module):
    """P_s [K_s, C], P_d [K_d, C] and P_v [K_s + K_d, C]."""

    def __init__(self, k_static, k_dynamic, dim, generator=None):
        super().__init__()
        if k_static < 2 or k_dynamic < 2:
            raise InvalidInputError("need at least 2 static and 2 dynamic prototypes")
        self.k_static, self.k_dynamic = int(k_static), int(k_dynamic)
        self.P_s = nn.Parameter(init_prototypes(k_static, dim, generator))
        self.P_d = nn.Parameter(init_prototypes(k_dynamic, dim, generator))
        self.P_v = nn.Parameter(init_prototypes(k_static + k_dynamic, dim, generator))

    def __getitem__(self, source):
        return {"s": self.P_s, "d": self.P_d, "v": self.P_v}[source]

    def split_v(self, x):
        """Split a trailing K_s + K_d axis into its static and dynamic parts."""
        return x[..., :self.k_static], x[..., self.k_static:]


def compute_code(vec, protos):
    """Cosine similarity between ``vec`` ([C] or [B, C]) and every prototype row."""
    pnorm = protos.norm(dim=-1)
    vnorm = vec.norm(dim=-1)
    if bool((pnorm == 0).any()):
        raise DegenerateInputError("zero-norm prototype")
    if bool((vnorm == 0).any()):
        raise DegenerateInputError("zero-norm feature vector")
    return (vec @ protos.t()) / (vnorm.unsqueeze(-1) * pnorm)


@torch.no_grad()
def sinkhorn_plan(codes, eps=0.05, n_iters=3):
    """Balanced transport plan ``[B, K]`` for the kernel ``exp(codes / eps)``.

    Each iteration scales rows (samples) to 1/B and then columns (concepts)
    to 1/K, so the returned plan has exact 1/K column sums and approximate
    1/B row sums. A per-row shift of ``codes`` cancels in the first row step.
    """
    codes = torch.as_tensor(codes)
    if codes.ndim != 2:
        raise InvalidInputError(f"codes must be [B, K], got {tuple(codes.shape)}")
    if not bool(torch.isfinite(codes).all()):
        raise InvalidInputError("non-finite codes")
    B, K = codes.shape
    if K < 2:
        raise InvalidInputError("need K >= 2 concepts")
    if B == 0:
        return codes.detach().clone()
    Q = torch.exp((codes - codes.max(dim=1, keepdim=True).values) / eps)
    for _ in range(n_iters):
        Q = Q / Q.sum(dim=1, keepdim=True) / B
        Q = Q / Q.sum(dim=0, keepdim=True) / K
    return Q


def sinkhorn_soft_codes(codes, cfg: AlignmentConfig | None = None):
    """Soft targets ``q̄`` ([B, K]): the balanced plan renormalized so each row
    sums to 1. Never carries gradient."""
    cfg = cfg or AlignmentConfig()
    plan = sinkhorn_plan(torch.as_tensor(codes).detach(), cfg.sinkhorn_eps, cfg.sinkhorn_iters)
    if plan.shape[0] == 0:
        return plan
    return plan / plan.sum(dim=1, keepdim=True)


def swapped_ce(target, code, tau):
    """Per-sample cross-entropy between ``target`` and softmax(code / tau)."""
    if target.shape != code.shape:
        raise InvalidInputError(
            f"soft code shape {tuple(target.shape)} != code shape {tuple(code.shape)}")
    return -(target.detach() * torch.log_softmax(code / tau, dim=-1)).sum(dim=-1)


def alignment_loss(q_s, q_d, q_v, soft, k_static, cfg: AlignmentConfig | None = None):
    """Batch mean of the static and dynamic swapped cross-entropies.

    ``soft`` maps ``"s"``, ``"d"``, ``"v_s"``, ``"v_d"`` to soft codes; they
    are treated as constants.
    """
    cfg = cfg or AlignmentConfig()
    q_vs, q_vd = q_v[..., :k_static], q_v[..., k_static:]
    static = swapped_ce(soft["s"], q_vs, cfg.tau) + swapped_ce(soft["v_s"], q_s, cfg.tau)
    dynamic = swapped_ce(soft["d"], q_vd, cfg.tau) + swapped_ce(soft["v_d"], q_d, cfg.tau)
    return (static + dynamic).mean()


def soft_codes_for(q_s, q_d, q_v, k_static, cfg: AlignmentConfig | None = None):
    return {
        "s": sinkhorn_soft_codes(q_s, cfg),
        "d": sinkhorn_soft_codes(q_d, cfg),
        "v_s": sinkhorn_soft_codes(q_v[..., :k_static], cfg),
        "v_d": sinkhorn_soft_codes(q_v[..., k_static:], cfg),
    }
