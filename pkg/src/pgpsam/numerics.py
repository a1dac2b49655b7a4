"""Tensor core: the handful of differentiable ops the model is built from.

Tensors are ``torch.Tensor`` (reverse-mode autograd comes from torch).  Spatial
maps are channel-last, ``(..., H, W, C)``; any leading dims are treated as a
batch.  Randomness goes through :func:`make_rng`, a Philox4x64-10 counter-based
generator keyed directly by the integer seed, so streams are reproducible
outside this package.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, NumericError

ORIENTATIONS = ("1xk", "kx1", "1x1")
POOL_AXES = {"height": -3, "width": -2, "channel": -1}


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox4x64-10 keyed by ``seed``; ``stream`` selects an independent counter block."""
    bitgen = np.random.Philox(key=int(seed) & (2**64 - 1))
    if stream:
        bitgen = bitgen.jumped(stream)
    return np.random.Generator(bitgen)


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return torch.from_numpy(rng.uniform(-bound, bound, size=tuple(shape))).to(torch.get_default_dtype())


def normal_init(rng: np.random.Generator, shape: Sequence[int], std: float) -> torch.Tensor:
    return torch.from_numpy(rng.normal(0.0, std, size=tuple(shape))).to(torch.get_default_dtype())


def _check_finite(x: torch.Tensor, what: str) -> None:
    if torch.isnan(x).any():
        raise NumericError(f"{what}: NaN in input")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}"
        )
    return a @ b


def softmax(x: torch.Tensor, axis: int) -> torch.Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"softmax: axis {axis} out of range for rank {x.dim()}")
    _check_finite(x, "softmax")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def avg_pool_axis(x: torch.Tensor, axis: str) -> torch.Tensor:
    """Mean over ``height``, ``width`` or ``channel`` of an ``(..., H, W, C)`` map, keepdim."""
    if x.dim() < 3:
        raise DimensionError(f"avg_pool_axis: expected (..., H, W, C), got {tuple(x.shape)}")
    try:
        dim = POOL_AXES[axis]
    except KeyError:
        raise ConfigError(f"avg_pool_axis: unknown axis {axis!r}") from None
    return x.mean(dim=dim, keepdim=True)


def strip_conv(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None,
    orientation: str,
) -> torch.Tensor:
    """Same-padded 1-D convolution along one spatial axis of a channel-last map.

    ``weight`` is ``(C_out, C_in, k)`` for ``"1xk"`` (along width) and ``"kx1"``
    (along height), or ``(C_out, C_in)`` for ``"1x1"``.  Zero padding.
    """
    if orientation not in ORIENTATIONS:
        raise ConfigError(f"strip_conv: orientation must be one of {ORIENTATIONS}")
    if orientation == "1x1":
        if weight.dim() != 2 or weight.shape[1] != x.shape[-1]:
            raise DimensionError(
                f"strip_conv: weight {tuple(weight.shape)} does not fit input {tuple(x.shape)}"
            )
        return F.linear(x, weight, bias)
    if weight.dim() != 3 or weight.shape[1] != x.shape[-1]:
        raise DimensionError(
            f"strip_conv: weight {tuple(weight.shape)} does not fit input {tuple(x.shape)}"
        )
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ConfigError(f"strip_conv: kernel size must be odd, got {k}")
    lead = x.shape[:-3]
    h, w, c = x.shape[-3:]
    nchw = x.reshape(-1, h, w, c).permute(0, 3, 1, 2)
    if orientation == "1xk":
        kernel, pad = weight.unsqueeze(2), (0, k // 2)
    else:
        kernel, pad = weight.unsqueeze(3), (k // 2, 0)
    out = F.conv2d(nchw, kernel, bias, padding=pad)
    return out.permute(0, 2, 3, 1).reshape(*lead, h, w, weight.shape[0])


@dataclass
class TopKResult:
    indices: torch.Tensor  # (..., rows, k) int64
    scores: torch.Tensor  # (..., rows, k), non-increasing per row
    degenerate: bool = False


def cosine_similarity_matrix(queries: torch.Tensor, pool: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Pairwise cosine similarity; pairs touching a zero-norm row score -1."""
    qn = queries.norm(dim=-1, keepdim=True)
    pn = pool.norm(dim=-1, keepdim=True)
    sims = (queries @ pool.transpose(-1, -2)) / (qn * pn.transpose(-1, -2)).clamp_min(1e-300)
    dead = (qn == 0) | (pn.transpose(-1, -2) == 0)
    degenerate = bool(dead.any())
    if degenerate:
        sims = sims.masked_fill(dead, -1.0)
    return sims, degenerate


def cosine_topk(queries: torch.Tensor, pool: torch.Tensor, k: int) -> TopKResult:
    """Per query row, the ``k`` most cosine-similar pool rows; ties go to the lower index.

    The selection is not differentiable; inputs are detached.
    """
    if queries.shape[-1] != pool.shape[-1]:
        raise DimensionError(
            f"cosine_topk: widths differ, {tuple(queries.shape)} vs {tuple(pool.shape)}"
        )
    n_pool = pool.shape[-2]
    if not 1 <= k <= n_pool:
        raise ConfigError(f"cosine_topk: k={k} outside [1, {n_pool}]")
    with torch.no_grad():
        sims, degenerate = cosine_similarity_matrix(queries.detach(), pool.detach())
        order = torch.sort(-sims, dim=-1, stable=True).indices[..., :k]
        scores = torch.gather(sims, -1, order)
    if degenerate:
        warnings.warn("cosine_topk: zero-norm prototype row; similarity set to -1", RuntimeWarning)
    return TopKResult(order, scores, degenerate)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    per_param: list[float] = field(default_factory=list)

    def passed(self, threshold: float = 1e-4) -> bool:
        return self.max_rel_error < threshold


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> torch.Tensor:
    """Element-wise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from dividing round-off by zero.
    """
    denom = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(floor)
    return (analytic - numeric).abs() / denom


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    max_elements: int = 10_000,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``params`` must be leaf tensors with ``requires_grad``.  When a parameter has
    more than ``max_elements`` entries a seeded subsample is checked.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss).all():
        raise NumericError(f"grad_check: non-finite loss {loss.item()}")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    rng = make_rng(seed)
    worst, per_param, checked = 0.0, [], 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= max_elements else np.sort(rng.choice(n, max_elements, replace=False))
            numeric = torch.empty(len(idx), dtype=p.dtype)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f()
                flat[i] = orig - eps
                down = f()
                flat[i] = orig
                if not (torch.isfinite(up) and torch.isfinite(down)):
                    raise NumericError("grad_check: non-finite loss under perturbation")
                numeric[j] = (up - down) / (2 * eps)
            err = relative_error(g.reshape(-1)[torch.as_tensor(idx)], numeric, floor)
            e = float(err.max()) if len(idx) else 0.0
            per_param.append(e)
            worst = max(worst, e)
            checked += len(idx)
    return GradCheckReport(worst, checked, per_param)
