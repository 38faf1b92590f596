"""Class weight generator and the two cooperative losses.

The generator runs one graph-attention branch per class on the batch graph
masked to that class. Its output W (N, C) is turned into penalty
multipliers R >= 1 that reweight the classifier's cross-entropy.
"""
from __future__ import annotations

import torch
from torch import nn

from . import numerics as nx
from .errors import ConfigError, NumericError
from .gga import GGA
from .sga import SGAEncoder

FUSION_MODES = ("select", "sum")


def mask_graphs(adj: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    """(C, N, N) stack; slice i keeps the edges between two samples of class i."""
    if onehot.shape[0] != adj.shape[0]:
        raise ConfigError(f"{onehot.shape[0]} labels for a {tuple(adj.shape)} graph")
    masks = onehot.T[:, :, None] * onehot.T[:, None, :]
    return adj[None] * masks


class BNMLP(nn.Module):
    """C -> 2C -> C with batch norm and ReLU after the hidden layer."""

    def __init__(self, n_classes: int):
        super().__init__()
        self.fc1 = nx.linear(n_classes, 2 * n_classes)
        self.bn = nx.BatchNorm1d(2 * n_classes)
        self.fc2 = nx.linear(2 * n_classes, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(nx.relu(self.bn(self.fc1(x))))


class ClassWeightGenerator(nn.Module):
    """Shared ROI encoder followed by C class-masked graph branches.

    ``fusion="select"``: each branch ends in its own BN-MLP and column i of
    branch i forms column i of W. ``fusion="sum"``: branch logits are summed
    and passed through one BN-MLP.
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
        fusion: str = "select",
    ):
        super().__init__()
        if fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {fusion!r}")
        self.fusion = fusion
        self.n_classes = n_classes
        self.sga = SGAEncoder(n_rois, in_features, dim, depth, encoder_heads, n_classes, dropout)
        self.branches = nn.ModuleList(GGA(dim, graph_heads, n_classes, dropout) for _ in range(n_classes))
        n_mlps = n_classes if fusion == "select" else 1
        self.mlps = nn.ModuleList(BNMLP(n_classes) for _ in range(n_mlps))

    def forward(self, x1: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        if masked.shape[0] != self.n_classes:
            raise ConfigError(f"expected {self.n_classes} masked graphs, got {masked.shape[0]}")
        x2, _ = self.sga(x1)
        if self.fusion == "sum":
            total = sum(branch(x2, g) for branch, g in zip(self.branches, masked))
            return self.mlps[0](total)
        cols = [mlp(branch(x2, g))[:, i] for i, (branch, mlp, g) in enumerate(zip(self.branches, self.mlps, masked))]
        return torch.stack(cols, dim=1)


def weight_transform(W: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Penalty multipliers from generated weights.

    Q is a softmax of the negated, min-shifted weights plus machine epsilon;
    R divides each row of Q by its minimum, so R >= 1 with one 1 per row and
    the largest weight gets the smallest multiplier.
    """
    shifted = -(W - W.min(dim=1, keepdim=True).values)
    Q = nx.row_softmax(shifted) + nx.MACHINE_EPS
    R = Q / Q.min(dim=1, keepdim=True).values
    return Q, R


def log_softmax_shifted(S: torch.Tensor) -> torch.Tensor:
    """log of the max-shifted softmax, evaluated without forming exp of large negatives."""
    shifted = S - S.max(dim=1, keepdim=True).values
    return shifted - torch.logsumexp(shifted, dim=1, keepdim=True)


def loss_weighted_ce(S: torch.Tensor, onehot: torch.Tensor, R: torch.Tensor) -> torch.Tensor:
    if S.shape != onehot.shape or R.shape != S.shape:
        raise ConfigError(f"shape mismatch: S {tuple(S.shape)}, Y {tuple(onehot.shape)}, R {tuple(R.shape)}")
    log_o = log_softmax_shifted(S)
    labelled = onehot != 0
    # unlabelled entries may be -inf at extreme logits; keep them out of 0 * inf
    log_o = torch.where(labelled, log_o, torch.zeros_like(log_o))
    if not bool(torch.isfinite(log_o).all()):
        raise NumericError("labelled-class probability underflowed to zero")
    return -(onehot * R * log_o).sum() / S.shape[0]


def cross_entropy(logits: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    return loss_weighted_ce(logits, onehot, torch.ones_like(logits))


def loss_classifier(S, onehot, R, sga_logits) -> torch.Tensor:
    """Classifier loss; R is treated as a constant."""
    return 0.5 * (loss_weighted_ce(S, onehot, R.detach()) + cross_entropy(sga_logits, onehot))


def rlogr(R: torch.Tensor) -> torch.Tensor:
    return R * torch.log(R)


def loss_generator(S, onehot, W, alpha: float = 0.5) -> torch.Tensor:
    """Generator loss; S is treated as a constant."""
    _, R = weight_transform(W)
    n, c = W.shape
    return loss_weighted_ce(S.detach(), onehot, R) - alpha / (n * c) * rlogr(R).sum()
