"""Contextual feature modulation: residual spatial and channel gating of encoder taps."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError
from .numerics import avg_pool_axis, strip_conv, uniform_init


class StripConv(nn.Module):
    def __init__(self, channels: int, k: int, orientation: str, rng: np.random.Generator):
        super().__init__()
        if orientation != "1x1" and k % 2 == 0:
            raise ConfigError(f"strip kernel size must be odd, got {k}")
        self.orientation = orientation
        if orientation == "1x1":
            shape, fan_in = (channels, channels), channels
        else:
            shape, fan_in = (channels, channels, k), channels * k
        self.weight = nn.Parameter(uniform_init(rng, shape, fan_in))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return strip_conv(x, self.weight, self.bias, self.orientation)


class ContextualModulation(nn.Module):
    """Parameters of one CFM block (strip convs, pointwise convs, channel LayerNorms)."""

    def __init__(self, channels: int, k: int = 7, rng: np.random.Generator | None = None):
        super().__init__()
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"CFM strip kernel size must be a positive odd int, got {k}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.k = channels, k
        self.spatial_conv_a = StripConv(channels, k, "1xk", rng)
        self.spatial_norm = nn.LayerNorm(channels)
        self.spatial_conv_b = StripConv(channels, k, "kx1", rng)
        self.channel_conv_a = StripConv(channels, 1, "1x1", rng)
        self.channel_norm = nn.LayerNorm(channels)
        self.channel_conv_b = StripConv(channels, 1, "1x1", rng)

    def forward(self, x):
        return cfm_forward(x, self)

    @torch.no_grad()
    def zero_gates(self) -> None:
        for conv in (self.spatial_conv_a, self.spatial_conv_b, self.channel_conv_a, self.channel_conv_b):
            conv.weight.zero_()
            conv.bias.zero_()


def _norm_relu(x, norm: nn.LayerNorm):
    return F.relu(norm(x))


def build_spatial_context(x: torch.Tensor) -> torch.Tensor:
    """Height-mean plus width-mean, each broadcast back to ``(..., H, W, C)``."""
    if x.dim() < 3:
        raise DimensionError(f"expected (..., H, W, C), got {tuple(x.shape)}")
    return avg_pool_axis(x, "height") + avg_pool_axis(x, "width")


def channel_context(x: torch.Tensor) -> torch.Tensor:
    """Spatial mean per channel, ``(..., 1, 1, C)``."""
    return avg_pool_axis(avg_pool_axis(x, "height"), "width")


def _check(x, p: ContextualModulation):
    if x.dim() < 3 or x.shape[-1] != p.channels:
        raise DimensionError(f"feature {tuple(x.shape)} does not match CFM width {p.channels}")


def spatial_modulate(x: torch.Tensor, ctx: torch.Tensor, p: ContextualModulation) -> torch.Tensor:
    _check(x, p)
    if ctx.shape != x.shape:
        raise DimensionError(f"spatial context {tuple(ctx.shape)} vs feature {tuple(x.shape)}")
    gate = torch.sigmoid(p.spatial_conv_b(_norm_relu(p.spatial_conv_a(ctx), p.spatial_norm)))
    return x * gate


def channel_modulate(x: torch.Tensor, ctx: torch.Tensor, p: ContextualModulation) -> torch.Tensor:
    _check(x, p)
    if ctx.shape[-3:] != (1, 1, p.channels):
        raise DimensionError(f"channel context must be (..., 1, 1, {p.channels}), got {tuple(ctx.shape)}")
    gate = torch.sigmoid(p.channel_conv_b(_norm_relu(p.channel_conv_a(ctx), p.channel_norm)))
    return x * gate


def cfm_forward(x: torch.Tensor, p: ContextualModulation) -> torch.Tensor:
    spatial = spatial_modulate(x, build_spatial_context(x), p)
    channel = channel_modulate(x, channel_context(x), p)
    # summed first so zeroed gates give exactly 2x
    return x + (spatial + channel)
