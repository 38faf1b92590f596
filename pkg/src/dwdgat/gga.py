"""Sample-level graph attention: batch adjacency graphs and MHSA graph-convolution layers."""
from __future__ import annotations

import logging

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .errors import ConfigError, DataError
from .sga import SGAEncoder

log = logging.getLogger(__name__)

GRAPH_MODES = ("phenotype", "euclidean", "relationship")


def cosine_distance(P) -> np.ndarray:
    """One minus cosine similarity between rows; the diagonal is fixed at 1."""
    P = np.asarray(P, dtype=np.float64)
    norms = np.linalg.norm(P, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise DataError(f"phenotype row {int(bad[0])} has zero norm")
    unit = P / norms[:, None]
    # elementwise products summed per pair: no dependence on row position,
    # so relabelling the samples permutes the result exactly
    d = 1.0 - (unit[:, None, :] * unit[None, :, :]).sum(axis=2)
    d = 0.5 * (d + d.T)
    # parallel rows give rounding-level residue; snap it to an exact 0
    d[np.abs(d) < 16 * nx.MACHINE_EPS] = 0.0
    d = np.clip(d, 0.0, 2.0)
    np.fill_diagonal(d, 1.0)
    return d


def median_kernel(d) -> np.ndarray:
    """Gaussian kernel of a distance matrix, width = median off-diagonal distance."""
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    off = d[~np.eye(n, dtype=bool)]
    if not off.size:
        return np.ones_like(d)
    sigma = float(np.median(off))
    if sigma == 0:
        log.warning("median pairwise distance is zero: off-diagonal similarities set to 1")
        a1 = np.ones_like(d)
    else:
        a1 = np.exp(-(d**2) / (2 * sigma**2))
    return a1


def renormalize(a) -> np.ndarray:
    """Drop self-loops, re-add unit self-loops and apply symmetric degree normalisation."""
    a = np.array(a, dtype=np.float64)
    np.fill_diagonal(a, 0.0)
    a = a + np.eye(a.shape[0])
    # sorted row sums do not depend on column order
    inv_sqrt = 1.0 / np.sqrt(np.sort(a, axis=1).sum(axis=1))
    # outer product first keeps the result exactly symmetric
    return a * (inv_sqrt[:, None] * inv_sqrt[None, :])


def build_phenotype_graph(P) -> np.ndarray:
    return renormalize(median_kernel(cosine_distance(P)))


def build_euclidean_graph(features) -> np.ndarray:
    """Gaussian-kernel graph over pairwise Euclidean distances of flattened sample features."""
    f = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    sq = (f**2).sum(axis=1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * f @ f.T, 0.0))
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return renormalize(median_kernel(d))


def build_relationship_graph(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return renormalize((labels[:, None] == labels[None, :]).astype(np.float64))


def build_graph(mode: str, phenotypes=None, features=None, labels=None) -> np.ndarray:
    if mode == "phenotype":
        return build_phenotype_graph(phenotypes)
    if mode == "euclidean":
        return build_euclidean_graph(features)
    if mode == "relationship":
        return build_relationship_graph(labels)
    raise ConfigError(f"unknown graph mode {mode!r}; expected one of {GRAPH_MODES}")


def adjacency_scaled(x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
    """(N, N, E) stack whose slice k holds every node row scaled by adj[k, i]."""
    return adj[:, :, None] * x[None, :, :]


class MHSAGCLayer(nn.Module):
    """Graph convolution whose neighbour aggregation is multi-head self-attention.

    For every sample k the node features are scaled by row k of the
    adjacency, attended over all N nodes, and the per-node outputs are summed.
    The result goes through layer norm, GELU and dropout. Output width is
    ``out_dim`` (twice the input width in the standard stack).
    """

    def __init__(self, in_dim: int, out_dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if out_dim % heads:
            raise ConfigError(f"output width {out_dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = out_dim // heads
        self.w_q = nx.linear(in_dim, out_dim, bias=False)
        self.w_k = nx.linear(in_dim, out_dim, bias=False)
        self.w_v = nx.linear(in_dim, out_dim, bias=False)
        self.norm = nx.LayerNorm(out_dim)
        self.dropout = dropout

    def aggregate(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        """Summed attention output before normalisation, shape (N, out_dim)."""
        n = x.shape[0]
        if adj.shape != (n, n):
            raise ConfigError(f"adjacency {tuple(adj.shape)} does not match {n} samples")

        # Node features scaled by row k of adj, then projected. The projections
        # have no bias, so (adj[k, i] * x[i]) @ W == adj[k, i] * (x[i] @ W).
        def project(w):
            t = adjacency_scaled(w(x), adj)  # (k, i, e_out)
            return t.view(n, n, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = project(self.w_q), project(self.w_k), project(self.w_v)
        att = nx.row_softmax((q * self.head_dim**-0.5) @ k.transpose(-1, -2))
        z = (att @ v).transpose(1, 2).reshape(n, n, -1)
        return z.sum(dim=1)

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        out = nx.gelu(self.norm(self.aggregate(x, adj)))
        return nx.dropout(out, self.dropout, self.training)


class GGA(nn.Module):
    """Two MHSA-GC layers (E -> 2E -> 4E), a linear reduction to 2E and a class head."""

    def __init__(self, dim: int, heads: int, n_classes: int, dropout: float = 0.0):
        super().__init__()
        self.layer1 = MHSAGCLayer(dim, 2 * dim, heads, dropout)
        self.layer2 = MHSAGCLayer(2 * dim, 4 * dim, heads, dropout)
        self.fc = nx.linear(4 * dim, 2 * dim)
        self.head = nx.linear(2 * dim, n_classes)

    def widths(self) -> list[int]:
        return [
            self.layer1.w_q.in_features,
            self.layer1.w_q.out_features,
            self.layer2.w_q.out_features,
            self.fc.out_features,
            self.head.out_features,
        ]

    def forward(self, x2: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        h = self.layer2(self.layer1(x2, adj), adj)
        return self.head(self.fc(h))


class DGAT(nn.Module):
    """The classifier: ROI-level encoder feeding the sample-level graph attention stack.

    ``forward`` returns the class scores S (N, C) and the encoder's auxiliary
    logits (N, C).
    """

    def __init__(
        self,
        n_rois: int,
        in_features: int,
        dim: int,
        depth: int,
        encoder_heads: int,
        graph_heads: int,
        n_classes: int,
        dropout: float = 0.0,
    ):
        super().__init__()
        self.sga = SGAEncoder(n_rois, in_features, dim, depth, encoder_heads, n_classes, dropout)
        self.gga = GGA(dim, graph_heads, n_classes, dropout)

    def forward(self, x1: torch.Tensor, adj: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x2, sga_logits = self.sga(x1)
        return self.gga(x2, adj), sga_logits
