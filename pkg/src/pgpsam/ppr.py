"""Progressive prototype refinement.

Two learnable banks: one intra-class prototype per class (N x C) and a shared
inter-class pool (alpha*N x C).  Each stage picks, for every class, the k most
cosine-similar pool rows, refines the assembled set against the image and class
features with a dual-path cross-attention, and scatter-adds the result back to
produce that stage's working prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DimensionError
from .numerics import cosine_topk, normal_init, softmax, uniform_init


class PrototypeSet(NamedTuple):
    """Working prototypes, optionally with leading batch dims."""

    intra: torch.Tensor  # (..., N, C)
    inter: torch.Tensor  # (..., Q, C)


class PrototypeBank(nn.Module):
    def __init__(
        self,
        n_classes: int,
        channels: int,
        alpha: int = 8,
        k_select: int = 3,
        rng: np.random.Generator | None = None,
        std: float = 0.02,
    ):
        super().__init__()
        if alpha < 1:
            raise ConfigError(f"alpha must be a positive int, got {alpha}")
        if not 1 <= k_select <= alpha * n_classes:
            raise ConfigError(f"k_select={k_select} must lie in [1, {alpha * n_classes}]")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_classes, self.alpha, self.k_select = n_classes, alpha, k_select
        self.intra = nn.Parameter(normal_init(rng, (n_classes, channels), std))
        self.inter = nn.Parameter(normal_init(rng, (alpha * n_classes, channels), std))

    @property
    def pool_size(self) -> int:
        return self.inter.shape[0]

    def as_set(self) -> PrototypeSet:
        return PrototypeSet(self.intra, self.inter)


@dataclass
class AssembledPrototypes:
    stacked: torch.Tensor  # (..., N, k+1, C); slot 0 is the intra prototype
    selected_indices: torch.Tensor  # (..., N, k) into the inter pool

    @property
    def flat(self) -> torch.Tensor:
        """Class-major ``(..., N*(k+1), C)`` view."""
        *lead, n, s, c = self.stacked.shape
        return self.stacked.reshape(*lead, n * s, c)


def gather_rows(pool: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``pool[..., idx[..., n, j], :]`` with matching leading dims -> ``(..., N, k, C)``."""
    lead = torch.broadcast_shapes(pool.shape[:-2], idx.shape[:-2])
    pool = pool.expand(*lead, *pool.shape[-2:])
    idx = idx.expand(*lead, *idx.shape[-2:])
    n, k = idx.shape[-2:]
    flat = idx.reshape(*lead, n * k, 1).expand(*lead, n * k, pool.shape[-1])
    return torch.gather(pool, -2, flat).reshape(*lead, n, k, pool.shape[-1])


def assemble_prototypes(protos: PrototypeSet | PrototypeBank, k_select: int | None = None) -> AssembledPrototypes:
    if isinstance(protos, PrototypeBank):
        k_select = protos.k_select if k_select is None else k_select
        protos = protos.as_set()
    if k_select is None:
        raise ConfigError("k_select is required when assembling a bare PrototypeSet")
    top = cosine_topk(protos.intra, protos.inter, k_select)
    selected = gather_rows(protos.inter, top.indices)
    intra = protos.intra.expand(*selected.shape[:-3], *protos.intra.shape[-2:])
    stacked = torch.cat([intra.unsqueeze(-2), selected], dim=-2)
    return AssembledPrototypes(stacked, top.indices)


class ClassAttention(nn.Module):
    """Per-pixel class attention over the Q' assembled prototypes."""

    def __init__(self, channels: int, n_classes: int, height: int, width: int, n_slots: int, rng):
        super().__init__()
        self.height, self.width, self.n_slots = height, width, n_slots
        self.feat_conv = nn.Linear(channels, 1)
        self.class_conv = nn.Linear(n_classes, 1)
        self.row_fc = nn.Linear(width, 1)
        self.col_fc = nn.Linear(height, 1)
        self.out_conv = nn.Linear(1, n_slots)
        for lin in (self.feat_conv, self.class_conv, self.row_fc, self.col_fc, self.out_conv):
            with torch.no_grad():
                lin.weight.copy_(uniform_init(rng, lin.weight.shape, lin.in_features))
                lin.bias.zero_()


def class_attention_weights(F_I: torch.Tensor, F_M: torch.Tensor, p: ClassAttention) -> torch.Tensor:
    """``(..., H, W, Q')`` weights, softmax over the slot axis at every pixel."""
    if F_I.shape[-3:-1] != F_M.shape[-3:-1]:
        raise DimensionError(
            f"class attention: spatial extents differ, {tuple(F_I.shape)} vs {tuple(F_M.shape)}"
        )
    if F_I.shape[-3:-1] != (p.height, p.width):
        raise DimensionError(f"class attention built for {p.height}x{p.width}, got {tuple(F_I.shape)}")
    rows = p.row_fc(p.feat_conv(F_I).squeeze(-1))  # (..., H, 1)
    cols = p.col_fc(p.class_conv(F_M).squeeze(-1).transpose(-1, -2))  # (..., W, 1)
    outer = rows @ cols.transpose(-1, -2)  # (..., H, W)
    return softmax(p.out_conv(outer.unsqueeze(-1)), axis=-1)


class RefinementParams(nn.Module):
    def __init__(self, channels: int, n_classes: int, height: int, width: int, k_select: int, rng):
        super().__init__()
        self.n_slots = n_classes * (k_select + 1)
        self.fuse = nn.Linear(channels + n_classes, channels)
        with torch.no_grad():
            self.fuse.weight.copy_(uniform_init(rng, self.fuse.weight.shape, channels + n_classes))
            self.fuse.bias.zero_()
        self.class_attention = ClassAttention(channels, n_classes, height, width, self.n_slots, rng)
        self.mix_a = nn.Parameter(torch.tensor(1.0))
        self.mix_b = nn.Parameter(torch.tensor(1.0))


def fused_feature(F_I: torch.Tensor, F_M: torch.Tensor, p: RefinementParams) -> torch.Tensor:
    return p.fuse(torch.cat([F_I, F_M], dim=-1))


def query_attention_weights(protos_flat: torch.Tensor, fused_flat: torch.Tensor) -> torch.Tensor:
    """``(..., Q', HW)``, scaled dot-product softmax over spatial positions per prototype."""
    return softmax(protos_flat @ fused_flat.transpose(-1, -2) * protos_flat.shape[-1] ** -0.5, axis=-1)


def refine_prototypes(
    assembled: AssembledPrototypes,
    F_I: torch.Tensor,
    F_M: torch.Tensor,
    p: RefinementParams,
    mix_a: torch.Tensor | float | None = None,
    mix_b: torch.Tensor | float | None = None,
) -> torch.Tensor:
    """Attention readout of the fused feature for each assembled prototype, ``(..., N, k+1, C)``."""
    mix_a = p.mix_a if mix_a is None else mix_a
    mix_b = p.mix_b if mix_b is None else mix_b
    *_, h, w, c = F_I.shape
    q_flat = assembled.flat
    if q_flat.shape[-2] != p.n_slots:
        raise DimensionError(f"refinement expects {p.n_slots} prototype slots, got {q_flat.shape[-2]}")
    fused = fused_feature(F_I, F_M, p).reshape(*F_I.shape[:-3], h * w, c)
    w_q = query_attention_weights(q_flat, fused)
    w_c = class_attention_weights(F_I, F_M, p.class_attention)
    w_c = w_c.reshape(*w_c.shape[:-3], h * w, p.n_slots).transpose(-1, -2)
    w_c = w_c / w_c.sum(dim=-1, keepdim=True)
    refined = (mix_a * w_c + mix_b * w_q) @ fused
    return refined.reshape(*refined.shape[:-2], *assembled.stacked.shape[-3:])


def scatter_update(protos: PrototypeSet | PrototypeBank, refined: torch.Tensor, idx: torch.Tensor) -> PrototypeSet:
    """Add refined slot 0 to intra, scatter-add slots 1..k into the inter pool at ``idx``.

    Colliding indices accumulate.  Returns a new set; the bank is not mutated.
    """
    if isinstance(protos, PrototypeBank):
        protos = protos.as_set()
    q, c = protos.inter.shape[-2:]
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= q):
        raise IndexError(f"scatter_update: index outside [0, {q})")
    lead = torch.broadcast_shapes(refined.shape[:-3], idx.shape[:-2], protos.inter.shape[:-2])
    n, s = refined.shape[-3:-1]
    intra = protos.intra + refined[..., 0, :]
    updates = refined[..., 1:, :].expand(*lead, n, s - 1, c).reshape(*lead, n * (s - 1), c)
    flat_idx = idx.expand(*lead, n, s - 1).reshape(*lead, n * (s - 1), 1).expand(*lead, n * (s - 1), c)
    delta = torch.zeros(*lead, q, c, dtype=updates.dtype).scatter_add(-2, flat_idx, updates)
    return PrototypeSet(intra, protos.inter + delta)


class ProgressiveRefinement(RefinementParams):
    """One stage of selection -> refinement -> scatter-back."""

    def __init__(self, channels: int, n_classes: int, height: int, width: int, k_select: int, rng):
        super().__init__(channels, n_classes, height, width, k_select, rng)
        self.k_select = k_select

    def forward(self, protos: PrototypeSet, F_I: torch.Tensor, F_M: torch.Tensor):
        assembled = assemble_prototypes(protos, self.k_select)
        refined = refine_prototypes(assembled, F_I, F_M, self)
        return scatter_update(protos, refined, assembled.selected_indices), assembled, refined
