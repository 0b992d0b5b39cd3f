"""Abnormal-branch scores from node/prototype interaction, and the anomaly mask."""
from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .attention import TransformerBlock, cross_attention
from .ssc import PairReducer


def compute_prototypes(g, z, alpha: float = 1.0, normalize: bool = False):
    """Class representations ``(softmax(z) ** alpha)^T g``, shape ``(C, d)``.

    With ``normalize`` each prototype is divided by its column mass, giving a
    weighted mean instead of a weighted sum.
    """
    w = torch.softmax(z, dim=-1) ** alpha
    h = w.transpose(0, 1) @ g
    if normalize:
        h = h / w.sum(dim=0)[:, None].clamp_min(1e-12)
    return h


def anomaly_mask(scores):
    """``1 - (y y^T)^2``: near zero only between two likely-abnormal nodes."""
    return 1 - (scores[:, None] * scores[None, :]) ** 2


class SaliencyHead(nn.Module):
    def __init__(self, d: int, heads: int, n_classes: int, alpha: float = 1.0,
                 normalize_prototypes: bool = False, hidden: int = 64):
        super().__init__()
        if alpha <= 0:
            raise ValueError("prototype exponent must be positive")
        self.alpha = alpha
        self.normalize_prototypes = normalize_prototypes
        self.refiner = TransformerBlock(d, heads)
        self.reducer = PairReducer(d, (d, 1))
        self.score1 = nn.Linear(n_classes, hidden)
        self.score2 = nn.Linear(hidden, 1)
        for lin in (self.score1, self.score2):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def prototypes(self, g, z):
        return compute_prototypes(g, z, self.alpha, self.normalize_prototypes)

    def refine_prototypes(self, h, g):
        return cross_attention(h, g, self.refiner)

    def scores(self, g, h_refined):
        pair = self.reducer(g, h_refined)[..., 0]  # (N, C)
        return torch.sigmoid(self.score2(F.relu(self.score1(pair)))[:, 0])

    def forward(self, g, z):
        h = self.refine_prototypes(self.prototypes(g, z), g)
        y = self.scores(g, h)
        return y, anomaly_mask(y)


def refine_prototypes(h, g, head: SaliencyHead):
    return head.refine_prototypes(h, g)


def anomaly_scores(g, h_refined, head: SaliencyHead):
    return head.scores(g, h_refined)
