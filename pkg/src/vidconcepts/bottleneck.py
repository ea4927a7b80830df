"""Sparsity and reconstruction regularizers on concept codes."""
from __future__ import annotations

import torch
from torch import nn

from .errors import InvalidInputError


class ReconstructionHead(nn.Module):
    """Two affine layers with a ReLU in between: code [K] -> feature [C]."""

    def __init__(self, k, dim, hidden=None):
        super().__init__()
        if k >= dim:
            raise InvalidInputError(f"bottleneck needs code length < feature dim, got {k} >= {dim}")
        hidden = dim if hidden is None else hidden
        self.fc1 = nn.Linear(k, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, q):
        if q.shape[-1] != self.fc1.in_features:
            raise InvalidInputError(
                f"head expects codes of length {self.fc1.in_features}, got {q.shape[-1]}")
        return self.fc2(torch.relu(self.fc1(q)))


def diversity_loss(q_s, q_d, q_v):
    return (q_s.abs().sum(-1) + q_d.abs().sum(-1) + q_v.abs().sum(-1)).mean()


def fidelity_loss(codes, targets, heads):
    """Batch mean of squared reconstruction errors summed over the three sources.

    ``codes``, ``targets`` and ``heads`` are mappings keyed by ``"s"``, ``"d"``,
    ``"v"``. Targets are detached: only the code path receives gradient.
    """
    total = 0.0
    for key in ("s", "d", "v"):
        target = targets[key].detach()
        recon = heads[key](codes[key])
        if recon.shape != target.shape:
            raise InvalidInputError(
                f"reconstruction {tuple(recon.shape)} vs target {tuple(target.shape)} for {key!r}")
        total = total + ((recon - target) ** 2).sum(-1)
    return total.mean()
