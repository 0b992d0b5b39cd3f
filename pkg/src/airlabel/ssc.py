"""Soft subtree map: pairwise same-segment probabilities and descendant refinement."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import DomainError


def gt_subtree_map(seg_labels) -> np.ndarray:
    """1 where two nodes share a segmental label (outlier matches only outlier)."""
    seg = np.asarray(seg_labels)
    return (seg[:, None] == seg[None, :]).astype(np.float64)


class PairReducer(nn.Module):
    """Shared MLP on concatenated pairs ``[a_i; b_j]`` (1x1 convolutions over pairs).

    The first layer is split into the two halves of the concatenation so the
    N x M x 2d tensor is never materialized.
    """

    def __init__(self, d: int, widths: tuple[int, ...]):
        super().__init__()
        self.left = nn.Linear(d, widths[0])
        self.right = nn.Linear(d, widths[0], bias=False)
        self.rest = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        for lin in (self.left, self.right, *self.rest):
            nn.init.xavier_uniform_(lin.weight)
            if lin.bias is not None:
                nn.init.zeros_(lin.bias)

    def forward(self, a, b):
        h = self.left(a)[:, None, :] + self.right(b)[None, :, :]
        for lin in self.rest:
            h = lin(F.relu(h))
        return h


class SoftSubtreeHead(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.reducer = PairReducer(d, (d, max(d // 2, 1), 1))
        self.blend = nn.Linear(d, 1)
        nn.init.xavier_uniform_(self.blend.weight)
        nn.init.zeros_(self.blend.bias)

    def raw_map(self, g):
        return torch.sigmoid(self.reducer(g, g)[..., 0])

    def blend_weights(self, g):
        """Per-node k_i in (0, 1)."""
        return torch.sigmoid(self.blend(g)[:, 0])

    def forward(self, g, desc_mask):
        raw = self.raw_map(g)
        return raw, refine_map(raw, desc_mask, self.blend_weights(g))


def predict_raw_map(g, head: SoftSubtreeHead):
    return head.raw_map(g)


def refine_map(raw, desc_mask, k, check: bool = True):
    """Raise same-subtree probability on ancestor -> descendant pairs.

    ``refined[i, j] = raw[i, j] + k[i] * (1 - raw[i, j])`` where ``j`` descends
    from ``i``, else ``raw[i, j]``.
    """
    if check:
        for name, t in (("raw", raw), ("k", k)):
            if (t < 0).any() or (t > 1).any():
                raise DomainError(f"{name} must lie in [0, 1]")
    desc_mask = desc_mask.to(raw.dtype)
    return desc_mask * (raw + k[:, None] * (1 - raw)) + (1 - desc_mask) * raw
