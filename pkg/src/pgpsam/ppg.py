"""Prototype-based prompt generation with separate dense and sparse pipelines.

The dense prompt is read out of the (projected) inter-class pool, the sparse
prompt out of the intra-class prototypes; neither pipeline sees the other's
prototypes once ``project_inter`` has run.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError
from .numerics import softmax, uniform_init


class PromptPair(NamedTuple):
    dense: torch.Tensor  # (..., H, W, C)
    sparse: torch.Tensor  # (..., N, C)


def _linear(c_in: int, c_out: int, rng) -> nn.Linear:
    lin = nn.Linear(c_in, c_out)
    with torch.no_grad():
        lin.weight.copy_(uniform_init(rng, (c_out, c_in), c_in))
        lin.bias.zero_()
    return lin


class PointwiseMLP(nn.Module):
    """Two pointwise convolutions with a GELU in between; hidden width = C."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.fc1 = _linear(channels, channels, rng)
        self.fc2 = _linear(channels, channels, rng)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class PromptGenerator(nn.Module):
    def __init__(self, channels: int, n_classes: int, rng):
        super().__init__()
        self.channels, self.n_classes = channels, n_classes
        self.query_fc = _linear(channels + n_classes, channels, rng)
        self.dense_mlp = PointwiseMLP(channels, rng)
        self.sparse_mlp = PointwiseMLP(channels, rng)

    def forward(self, F_I: torch.Tensor, intra: torch.Tensor, inter: torch.Tensor) -> PromptPair:
        inter_hat = project_inter(inter, intra, self)
        return generate_prompts(F_I, inter_hat, intra, self)


def project_inter(P_inter: torch.Tensor, P_intra: torch.Tensor, p: PromptGenerator) -> torch.Tensor:
    """FC over ``[P_inter | P_inter P_intra^T / sqrt(C)]`` -> ``(..., Q, C)``."""
    if P_inter.shape[-1] != P_intra.shape[-1] or P_inter.shape[-1] != p.channels:
        raise DimensionError(
            f"project_inter: widths differ, inter {tuple(P_inter.shape)} intra {tuple(P_intra.shape)}"
        )
    query = P_inter @ P_intra.transpose(-1, -2) * p.channels ** -0.5
    lead = torch.broadcast_shapes(P_inter.shape[:-2], query.shape[:-2])
    P_inter = P_inter.expand(*lead, *P_inter.shape[-2:])
    return p.query_fc(torch.cat([P_inter, query], dim=-1))


def _flatten_hw(F_I: torch.Tensor) -> torch.Tensor:
    *lead, h, w, c = F_I.shape
    return F_I.reshape(*lead, h * w, c)


def dense_attention(F_I: torch.Tensor, inter_hat: torch.Tensor) -> torch.Tensor:
    """``(..., HW, Q)``, scaled dot-product softmax over the pool axis per pixel."""
    return softmax(_flatten_hw(F_I) @ inter_hat.transpose(-1, -2) * inter_hat.shape[-1] ** -0.5, axis=-1)


def sparse_attention(F_I: torch.Tensor, intra: torch.Tensor) -> torch.Tensor:
    """``(..., N, HW)``, scaled dot-product softmax over pixels per class prototype."""
    return softmax(intra @ _flatten_hw(F_I).transpose(-1, -2) * intra.shape[-1] ** -0.5, axis=-1)


def dense_prompt(F_I: torch.Tensor, inter_hat: torch.Tensor, p: PromptGenerator) -> torch.Tensor:
    if F_I.shape[-1] != inter_hat.shape[-1]:
        raise DimensionError(f"dense_prompt: {tuple(F_I.shape)} vs {tuple(inter_hat.shape)}")
    readout = dense_attention(F_I, inter_hat) @ inter_hat
    return p.dense_mlp(readout).reshape(*readout.shape[:-2], *F_I.shape[-3:])


def sparse_prompt(F_I: torch.Tensor, intra: torch.Tensor, p: PromptGenerator) -> torch.Tensor:
    if F_I.shape[-1] != intra.shape[-1]:
        raise DimensionError(f"sparse_prompt: {tuple(F_I.shape)} vs {tuple(intra.shape)}")
    return p.sparse_mlp(sparse_attention(F_I, intra) @ _flatten_hw(F_I))


def generate_prompts(F_I, inter_hat, intra, p: PromptGenerator) -> PromptPair:
    return PromptPair(dense_prompt(F_I, inter_hat, p), sparse_prompt(F_I, intra, p))


class LinearPrompts(nn.Module):
    """Ablation stand-in: prompts as plain linear maps of the prototypes.

    Dense prompt is a projection of the mean inter prototype broadcast over
    the map; sparse tokens are a projection of each intra prototype.
    """

    def __init__(self, channels: int, rng):
        super().__init__()
        self.dense_proj = _linear(channels, channels, rng)
        self.sparse_proj = _linear(channels, channels, rng)

    def forward(self, F_I: torch.Tensor, intra: torch.Tensor, inter: torch.Tensor) -> PromptPair:
        lead = torch.broadcast_shapes(F_I.shape[:-3], intra.shape[:-2], inter.shape[:-2])
        dense = self.dense_proj(inter.mean(dim=-2))
        dense = dense.reshape(*dense.shape[:-1], 1, 1, dense.shape[-1]).expand(*lead, *F_I.shape[-3:])
        sparse = self.sparse_proj(intra).expand(*lead, *intra.shape[-2:])
        return PromptPair(dense, sparse)
