"""ROI-level feature extraction: centrality pooling and a small transformer encoder."""
from __future__ import annotations

import logging

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .errors import ConfigError

log = logging.getLogger(__name__)

SIMILARITY_MODES = ("centrality", "pairwise_mean")


def centrality_pool(X, similarity: str = "centrality") -> np.ndarray:
    """Zero out the half of the ROIs farthest from the rest and append a similarity column.

    Centrality is each ROI's summed Euclidean distance to all other ROI rows.
    The floor(R/2) ROIs with the largest centrality lose their features (on
    ties the lower index survives). Similarity is a Gaussian kernel with
    width equal to the mean centrality and is computed from the unpooled rows.
    With ``similarity="pairwise_mean"`` each ROI gets the mean kernel value of
    its pairwise distances instead of the kernel of its centrality.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ConfigError(f"centrality pooling needs an (R>=2, F) matrix, got {X.shape}")
    if similarity not in SIMILARITY_MODES:
        raise ConfigError(f"unknown similarity mode {similarity!r}")
    R = X.shape[0]
    diff = X[:, None, :] - X[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    cent = dist.sum(axis=1)
    sigma = cent.mean()
    idx = np.arange(R)
    if sigma == 0:
        log.warning("all ROI rows identical: similarity set to 1")
        sim = np.ones(R)
        drop = idx[R - R // 2:]
    else:
        if similarity == "centrality":
            sim = np.exp(-(cent**2) / (2 * sigma**2))
        else:
            sim = np.exp(-(dist**2) / (2 * sigma**2)).mean(axis=1)
        # largest centrality first, higher index first among ties
        order = np.lexsort((-idx, -cent))
        drop = order[: R // 2]
    out = np.concatenate([X, sim[:, None]], axis=1)
    out[drop, :-1] = 0.0
    return out


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"embedding width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nx.linear(dim, 3 * dim)
        self.proj = nx.linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, t, e = x.shape
        q, k, v = self.qkv(x).view(n, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        att = nx.row_softmax((q * self.head_dim**-0.5) @ k.transpose(-1, -2))
        out = (att @ v).transpose(1, 2).reshape(n, t, e)
        return self.proj(out)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, ff_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nx.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nx.LayerNorm(dim)
        self.ff1 = nx.linear(dim, ff_mult * dim)
        self.ff2 = nx.linear(ff_mult * dim, dim)
        self.dropout = dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        h = nx.gelu(self.ff1(self.norm2(x)))
        h = nx.dropout(h, self.dropout, self.training)
        return x + self.ff2(h)


class SGAEncoder(nn.Module):
    """Embeds pooled ROI rows, prepends a class token and runs the encoder.

    Input is (N, R, F') or a single (R, F') matrix; returns the class-token
    representation (N, E) and auxiliary class logits (N, C).
    """

    def __init__(
        self,
        n_rois: int,
        in_features: int,
        dim: int,
        depth: int,
        heads: int,
        n_classes: int,
        dropout: float = 0.0,
    ):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"embedding width {dim} not divisible by {heads} heads")
        self.embed = nx.linear(in_features, dim)
        self.cls = nx.embedding_param(1, 1, dim)
        self.pos = nx.embedding_param(1, n_rois + 1, dim)
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads, dropout=dropout) for _ in range(depth))
        self.norm = nx.LayerNorm(dim)
        self.head = nx.linear(dim, n_classes)
        self.dropout = dropout

    def forward(self, x1: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x1.dim() == 2:
            x1 = x1.unsqueeze(0)
        n, r, f = x1.shape
        if f != self.embed.in_features or r + 1 != self.pos.shape[1]:
            raise ConfigError(f"encoder built for ({self.pos.shape[1] - 1}, {self.embed.in_features}), got ({r}, {f})")
        y = nx.dropout(self.embed(x1), self.dropout, self.training)
        y = torch.cat([self.cls.expand(n, -1, -1), y], dim=1) + self.pos
        for block in self.blocks:
            y = block(y)
        cls = self.norm(y)[:, 0]
        return cls, self.head(cls)
