"""Transformer blocks over the nodes of one tree.

Three attention variants share one block type:

* SPD-biased self-attention: ``softmax(QK^T / sqrt(d_k) + B[clip(spd)])``
* soft-masked self-attention: ``softmax((QK^T / sqrt(d_k)) * M)``, the mask
  multiplies the logits (no additive -inf masking)
* cross-attention: queries from one set, keys/values from another

Every block uses post-norm residuals and a ReLU feed-forward of width 2d.
"""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .errors import MaskOutOfRange, ShapeMismatch

L_MAX = 15


class TransformerBlock(nn.Module):
    def __init__(self, d: int, heads: int, spd_bias: bool = False, l_max: int = L_MAX):
        super().__init__()
        if d % heads:
            raise ShapeMismatch(f"d={d} is not divisible by heads={heads}")
        self.d, self.heads, self.d_k, self.l_max = d, heads, d // heads, l_max
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d)
        self.ff1 = nn.Linear(d, 2 * d)
        self.ff2 = nn.Linear(2 * d, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.codebook = nn.Parameter(torch.zeros(heads, l_max + 1)) if spd_bias else None
        self.reset_parameters()

    def reset_parameters(self):
        for lin in (self.q, self.k, self.v, self.o, self.ff1, self.ff2):
            nn.init.xavier_uniform_(lin.weight)
            if lin.bias is not None:
                nn.init.zeros_(lin.bias)
        if self.codebook is not None:
            nn.init.zeros_(self.codebook)

    def _split(self, x):
        return x.view(x.shape[0], self.heads, self.d_k).transpose(0, 1)

    def logits(self, xq, xkv, spd=None, mask=None):
        """Per-head pre-softmax scores, shape ``(heads, Nq, Nk)``."""
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        scores = q @ k.transpose(1, 2) / math.sqrt(self.d_k)
        if mask is not None:
            scores = scores * mask
        if spd is not None:
            if self.codebook is None:
                raise ShapeMismatch("block has no SPD codebook")
            scores = scores + self.codebook[:, spd.clamp(max=self.l_max)]
        return scores

    def forward(self, x, kv=None, spd=None, mask=None, return_weights=False):
        if x.dim() != 2 or x.shape[1] != self.d:
            raise ShapeMismatch(f"expected (N, {self.d}) input, got {tuple(x.shape)}")
        xkv = x if kv is None else kv
        if xkv.dim() != 2 or xkv.shape[1] != self.d:
            raise ShapeMismatch(f"expected (M, {self.d}) keys, got {tuple(xkv.shape)}")
        for name, m in (("spd", spd), ("mask", mask)):
            if m is not None and tuple(m.shape) != (x.shape[0], xkv.shape[0]):
                raise ShapeMismatch(f"{name} has shape {tuple(m.shape)}, expected {(x.shape[0], xkv.shape[0])}")
        weights = torch.softmax(self.logits(x, xkv, spd, mask), dim=-1)
        v = self._split(self.v(xkv))
        attended = (weights @ v).transpose(0, 1).reshape(x.shape[0], self.d)
        h = self.norm1(x + self.o(attended))
        out = self.norm2(h + self.ff2(F.relu(self.ff1(h))))
        return (out, weights) if return_weights else out


def _check_mask(mask):
    if mask is not None and ((mask < 0).any() or (mask > 1).any()):
        raise MaskOutOfRange("attention mask entries must lie in [0, 1]")


def biased_self_attention(x, block: TransformerBlock, spd, return_weights=False):
    return block(x, spd=spd, return_weights=return_weights)


def masked_self_attention(x, block: TransformerBlock, mask, spd=None, return_weights=False):
    """Self-attention with logits multiplied by ``mask``; ``spd`` only when the bias flag is on."""
    _check_mask(mask)
    return block(x, mask=mask, spd=spd, return_weights=return_weights)


def cross_attention(xq, kv, block: TransformerBlock, return_weights=False):
    return block(xq, kv=kv, return_weights=return_weights)
