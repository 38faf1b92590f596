"""Differentiable substrate: double-precision tensor ops, gradient checking, Adam.

Tensors, reverse-mode gradients and the Adam update are provided by PyTorch.
This module pins the dtype, adds the few ops whose edge-case behaviour the
model depends on (zero-variance layer norm, singleton batch norm, checked
log), and supplies an independent central-difference gradient checker.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)

DTYPE = torch.float64
MACHINE_EPS = float(np.finfo(np.float64).eps)

LAYER_NORM_EPS = 1e-5
ZERO_VARIANCE_GUARD = 1e-12
BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ConfigError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def row_softmax(m: torch.Tensor) -> torch.Tensor:
    return torch.softmax(m, dim=-1)


def layer_norm(
    x: torch.Tensor,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = LAYER_NORM_EPS,
) -> torch.Tensor:
    """Normalise over the last axis.

    Rows whose variance is below ``ZERO_VARIANCE_GUARD`` map to zeros (before
    the affine part), so an all-zero input row stays zero.
    """
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    flat = var < ZERO_VARIANCE_GUARD
    # keep the unselected branch finite so its gradient is not NaN
    safe_var = torch.where(flat, torch.ones_like(var), var)
    out = (x - mean) * torch.rsqrt(safe_var + eps)
    out = torch.where(flat, torch.zeros_like(out), out)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def dropout(x: torch.Tensor, rate: float, training: bool) -> torch.Tensor:
    if not training or rate == 0.0:
        return x
    return F.dropout(x, p=rate, training=True)


def batch_norm(
    x: torch.Tensor,
    training: bool,
    running_mean: torch.Tensor | None = None,
    running_var: torch.Tensor | None = None,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    momentum: float = BATCH_NORM_MOMENTUM,
    eps: float = BATCH_NORM_EPS,
) -> torch.Tensor:
    """Batch norm over axis 0; a training batch of one falls back to identity normalisation."""
    if training and x.shape[0] == 1:
        log.warning("batch norm on a batch of size 1: using identity normalisation")
        out = x
        if weight is not None:
            out = out * weight
        if bias is not None:
            out = out + bias
        return out
    return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)


def safe_log(x: torch.Tensor) -> torch.Tensor:
    if bool((x <= 0).any()):
        raise NumericError("log of a non-positive value")
    return torch.log(x)


class LayerNorm(nn.Module):
    """Layer norm with the zero-variance guard of :func:`layer_norm`."""

    def __init__(self, dim: int, eps: float = LAYER_NORM_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm1d(nn.BatchNorm1d):
    def __init__(self, dim: int):
        super().__init__(dim, eps=BATCH_NORM_EPS, momentum=BATCH_NORM_MOMENTUM, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        use_batch_stats = self.training
        return batch_norm(
            x,
            use_batch_stats,
            self.running_mean,
            self.running_var,
            self.weight,
            self.bias,
            self.momentum,
            self.eps,
        )


def linear(in_dim: int, out_dim: int, bias: bool = True) -> nn.Linear:
    # torch's default init is uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias
    return nn.Linear(in_dim, out_dim, bias=bias, dtype=DTYPE)


def embedding_param(*shape: int) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, dtype=DTYPE) * 0.02)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    diagnostic: str = ""

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.diagnostic and self.max_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        text = f"{status} max rel err {self.max_error:.3e} (worst: {worst}, tol {self.tol:.0e})"
        return f"{text}; {self.diagnostic}" if self.diagnostic else text


def _named(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, nn.Module):
        return [(n, p) for n, p in params.named_parameters() if p.requires_grad]
    if isinstance(params, Mapping):
        return list(params.items())
    return [(f"param{i}", p) for i, p in enumerate(params)]


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: nn.Module | Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    For each parameter tensor the relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` with ``|.|``
    the Euclidean norm over the tensor. ``loss_fn`` must be deterministic.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ConfigError(f"finite-difference step {step} outside [1e-6, 1e-4]")
    named = _named(params)
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        return GradCheckReport({}, tol, f"non-finite loss {loss.item()}")
    if loss.requires_grad:
        analytic = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    else:
        analytic = [None] * len(named)

    errors = {}
    with torch.no_grad():
        for (name, p), a in zip(named, analytic):
            a = torch.zeros_like(p) if a is None else a.detach()
            numeric = torch.zeros_like(p)
            flat = p.view(-1)
            num_flat = numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    return GradCheckReport(errors, tol, f"non-finite loss while perturbing {name}[{i}]")
                num_flat[i] = (up - down) / (2 * step)
            diff = torch.linalg.vector_norm(a - numeric).item()
            scale = max(torch.linalg.vector_norm(a).item(), torch.linalg.vector_norm(numeric).item(), floor)
            errors[name] = diff / scale
    return GradCheckReport(errors, tol)


# --------------------------------------------------------------------------
# Adam


def make_adam(
    params: Iterable[torch.Tensor],
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(beta1, beta2), eps=eps)


def adam_step(optimizer: torch.optim.Optimizer) -> None:
    """One bias-corrected Adam update; refuses to apply non-finite gradients."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise NumericError(f"non-finite gradient in parameter of shape {tuple(p.shape)}")
    optimizer.step()


def optimizer_step_count(optimizer: torch.optim.Optimizer) -> int:
    steps = [int(s["step"]) for s in optimizer.state.values() if "step" in s]
    return max(steps, default=0)
