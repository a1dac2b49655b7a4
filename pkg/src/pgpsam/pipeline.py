"""Two-stage prototype-guided prompt learning on top of a frozen toy encoder.

Data flow per image (all maps channel-last)::

    image -> ToyEncoder -> tap after block 1, tap after last block, embedding
    stage s:  F_I = CFM_s(tap_s)
              F_M = softmax(class_head(F_I))       (stage 1)
                  = softmax(stage-1 low-res logits) (stage 2)
              prototypes = PPR_s(previous prototypes, F_I, F_M)
              prompts    = PPG_s(F_I, prototypes)
              logits     = shared MaskDecoder(embedding, prompts)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .cfm import ContextualModulation
from .errors import ConfigError, DataError, NumericError
from .numerics import make_rng, softmax, uniform_init
from .ppg import LinearPrompts, PromptGenerator, PromptPair
from .ppr import PrototypeBank, PrototypeSet, ProgressiveRefinement

CHECKPOINT_FORMAT = "pgpsam-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_classes: int = 4
    image_size: int = 64
    patch: int = 4
    channels: int = 64
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    lora_rank: int = 4
    alpha: int = 8
    k_select: int = 3
    strip_k: int = 7
    decoder_rounds: int = 2
    use_cfm: bool = True
    use_ppg: bool = True
    use_ppr: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.n_classes < 2:
            raise ConfigError("need background plus at least one foreground class")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.strip_k % 2 == 0:
            raise ConfigError(f"strip kernel size must be odd, got {self.strip_k}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _linear(c_in: int, c_out: int, rng, bias: bool = True) -> nn.Linear:
    lin = nn.Linear(c_in, c_out, bias=bias)
    with torch.no_grad():
        lin.weight.copy_(uniform_init(rng, (c_out, c_in), c_in))
        if bias:
            lin.bias.zero_()
    return lin


# --------------------------------------------------------------------------- encoder


class LoraLinear(nn.Module):
    """Frozen ``base`` plus a trainable rank-r update ``x @ down @ up``; ``up`` starts at zero."""

    def __init__(self, base: nn.Linear, rank: int, rng):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.down = nn.Parameter(uniform_init(rng, (base.in_features, rank), base.in_features))
        self.up = nn.Parameter(torch.zeros(rank, base.out_features))

    def forward(self, x):
        return self.base(x) + (x @ self.down) @ self.up


class EncoderBlock(nn.Module):
    def __init__(self, channels: int, heads: int, mlp_ratio: int, lora_rank: int, rng):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(channels)
        self.q = LoraLinear(_linear(channels, channels, rng), lora_rank, rng)
        self.k = _linear(channels, channels, rng)
        self.v = LoraLinear(_linear(channels, channels, rng), lora_rank, rng)
        self.proj = _linear(channels, channels, rng)
        self.norm2 = nn.LayerNorm(channels)
        self.fc1 = _linear(channels, channels * mlp_ratio, rng)
        self.fc2 = _linear(channels * mlp_ratio, channels, rng)

    def _split(self, x):
        *lead, n, c = x.shape
        return x.reshape(*lead, n, self.heads, c // self.heads).transpose(-2, -3)

    def forward(self, x):
        *lead, h, w, c = x.shape
        tokens = x.reshape(*lead, h * w, c)
        y = self.norm1(tokens)
        q, k, v = self._split(self.q(y)), self._split(self.k(y)), self._split(self.v(y))
        attn = softmax(q @ k.transpose(-1, -2) / math.sqrt(c // self.heads), axis=-1)
        mixed = (attn @ v).transpose(-2, -3).reshape(*lead, h * w, c)
        tokens = tokens + self.proj(mixed)
        tokens = tokens + self.fc2(F.gelu(self.fc1(self.norm2(tokens))))
        return tokens.reshape(*lead, h, w, c)


def sincos_position_grid(grid: int, channels: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal embedding, ``(grid, grid, channels)``."""
    quarter = channels // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1)))
    pos = torch.arange(grid, dtype=torch.float64)
    ang = pos[:, None] * freqs[None, :]
    row = torch.cat([ang.sin(), ang.cos()], dim=-1)  # (grid, 2q)
    emb = torch.zeros(grid, grid, channels, dtype=torch.float64)
    emb[:, :, : 2 * quarter] = row[:, None, :]
    emb[:, :, 2 * quarter : 4 * quarter] = row[None, :, :]
    return emb.float()


class EncoderOutput(NamedTuple):
    taps: tuple[torch.Tensor, torch.Tensor]
    embedding: torch.Tensor


class ToyEncoder(nn.Module):
    """Small ViT stand-in for a frozen foundation-model encoder; only LoRA factors train."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.patch, self.image_size = cfg.patch, cfg.image_size
        self.patch_embed = _linear(cfg.patch * cfg.patch, cfg.channels, rng)
        self.register_buffer("pos", sincos_position_grid(cfg.grid, cfg.channels))
        # keeps absolute position from dominating patch content
        self.pos_scale = 0.1
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.channels, cfg.heads, cfg.mlp_ratio, cfg.lora_rank, rng) for _ in range(cfg.blocks)
        )
        self.neck = nn.LayerNorm(cfg.channels)
        for name, p in self.named_parameters():
            if not name.endswith((".down", ".up")):
                p.requires_grad_(False)

    def lora_parameters(self):
        return [p for n, p in self.named_parameters() if n.endswith((".down", ".up"))]

    def base_parameters(self):
        return [p for n, p in self.named_parameters() if not n.endswith((".down", ".up"))]

    def forward(self, image: torch.Tensor) -> EncoderOutput:
        *lead, h, w = image.shape[:-3] + image.shape[-2:]
        if h % self.patch or w % self.patch:
            raise ConfigError(f"image {h}x{w} not divisible by patch {self.patch}")
        p = self.patch
        x = image.reshape(*lead, h // p, p, w // p, p).transpose(-2, -3).reshape(*lead, h // p, w // p, p * p)
        x = self.patch_embed((x - 0.5) / 0.25) + self.pos_scale * self.pos.to(x.dtype)
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == 0:
                taps.append(x)
        taps.append(x)
        return EncoderOutput((taps[0], taps[-1]), self.neck(x))


def encoder_forward(image: torch.Tensor, enc: ToyEncoder) -> EncoderOutput:
    return enc(image)


# --------------------------------------------------------------------------- decoder


class CrossAttention(nn.Module):
    def __init__(self, channels: int, rng):
        super().__init__()
        self.scale = 1.0 / math.sqrt(channels)
        self.norm = nn.LayerNorm(channels)
        self.q = _linear(channels, channels, rng)
        # a key bias shifts every logit of a query equally; softmax ignores it
        self.k = _linear(channels, channels, rng, bias=False)
        self.v = _linear(channels, channels, rng)
        self.out = _linear(channels, channels, rng)

    def forward(self, queries, keys):
        q = self.q(self.norm(queries))
        attn = softmax(q @ self.k(keys).transpose(-1, -2) * self.scale, axis=-1)
        return self.out(attn @ self.v(keys))


class DecoderRound(nn.Module):
    def __init__(self, channels: int, rng):
        super().__init__()
        self.token_to_image = CrossAttention(channels, rng)
        self.token_norm = nn.LayerNorm(channels)
        self.token_fc1 = _linear(channels, channels, rng)
        self.token_fc2 = _linear(channels, channels, rng)
        self.image_to_token = CrossAttention(channels, rng)

    def forward(self, tokens, feats):
        tokens = tokens + self.token_to_image(tokens, feats)
        tokens = tokens + self.token_fc2(F.gelu(self.token_fc1(self.token_norm(tokens))))
        feats = feats + self.image_to_token(feats, tokens)
        return tokens, feats


class MaskDecoder(nn.Module):
    """Class tokens and image features exchange information, then each token scores every pixel."""

    def __init__(self, channels: int, rounds: int, rng):
        super().__init__()
        self.channels = channels
        self.input_norm = nn.LayerNorm(channels)
        self.rounds = nn.ModuleList(DecoderRound(channels, rng) for _ in range(rounds))
        self.token_out_norm = nn.LayerNorm(channels)
        self.feat_out_norm = nn.LayerNorm(channels)
        self.pixel_norm = nn.LayerNorm(channels)
        self.pixel_fc1 = _linear(channels, channels, rng)
        self.pixel_fc2 = _linear(channels, channels, rng)

    def forward(self, embedding: torch.Tensor, prompts: PromptPair) -> torch.Tensor:
        """Low-resolution logits ``(..., N, H', W')``."""
        dense = prompts.dense
        if dense.shape[-3:-1] != embedding.shape[-3:-1]:
            dense = F.interpolate(
                dense.movedim(-1, -3).reshape(-1, *dense.shape[-1:], *dense.shape[-3:-1]),
                size=embedding.shape[-3:-1], mode="bilinear", align_corners=False,
            ).movedim(-3, -1).reshape(*dense.shape[:-3], *embedding.shape[-3:-1], dense.shape[-1])
        fused = self.input_norm(embedding + dense)
        *lead, h, w, c = fused.shape
        feats = fused.reshape(*lead, h * w, c)
        tokens = prompts.sparse
        for rnd in self.rounds:
            tokens, feats = rnd(tokens, feats)
        feats = feats + self.pixel_fc2(F.gelu(self.pixel_fc1(self.pixel_norm(feats))))
        # normalised operands keep logit scale independent of prompt magnitude
        logits = self.token_out_norm(tokens) @ self.feat_out_norm(feats).transpose(-1, -2) / math.sqrt(c)
        return logits.reshape(*logits.shape[:-1], h, w)


def upsample_logits(logits: torch.Tensor, size: int) -> torch.Tensor:
    lead, (n, h, w) = logits.shape[:-3], logits.shape[-3:]
    out = F.interpolate(logits.reshape(-1, n, h, w), size=(size, size), mode="bilinear", align_corners=False)
    return out.reshape(*lead, n, size, size)


def decode_masks(embedding: torch.Tensor, prompts: PromptPair, decoder: MaskDecoder, size: int | None = None) -> torch.Tensor:
    """Per-class logits ``(..., N, H, W)`` at image resolution ``size`` (default: embedding grid)."""
    low = decoder(embedding, prompts)
    return low if size is None else upsample_logits(low, size)


# --------------------------------------------------------------------------- model


@dataclass
class StageState:
    F_I: torch.Tensor
    F_M: torch.Tensor
    prototypes: PrototypeSet
    prompts: PromptPair
    low_logits: torch.Tensor  # (..., N, H', W')
    logits: torch.Tensor  # (..., N, H, W)


class Stage(nn.Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        c, n, g = cfg.channels, cfg.n_classes, cfg.grid
        self.cfg = cfg
        self.cfm = ContextualModulation(c, cfg.strip_k, rng) if cfg.use_cfm else None
        self.ppr = ProgressiveRefinement(c, n, g, g, cfg.k_select, rng) if cfg.use_ppr else None
        self.ppg = PromptGenerator(c, n, rng) if cfg.use_ppg else LinearPrompts(c, rng)

    def enhance(self, tap):
        return self.cfm(tap) if self.cfm is not None else tap


class PGPSam(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = make_rng(cfg.seed, stream=1)
        self.encoder = ToyEncoder(cfg, rng)
        self.bank = PrototypeBank(cfg.n_classes, cfg.channels, cfg.alpha, cfg.k_select, rng)
        self.class_head = _linear(cfg.channels, cfg.n_classes, rng)
        self.stages = nn.ModuleList([Stage(cfg, rng), Stage(cfg, rng)])
        self.decoder = MaskDecoder(cfg.channels, cfg.decoder_rounds, rng)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, image: torch.Tensor) -> list[StageState]:
        """``image`` is ``(..., 1, H, W)``; returns one :class:`StageState` per stage."""
        enc = self.encoder(image)
        protos = self.bank.as_set()
        states: list[StageState] = []
        for s, (stage, tap) in enumerate(zip(self.stages, enc.taps)):
            state = stage_forward(stage, tap, enc.embedding, protos, self, states[-1] if states else None)
            protos = state.prototypes
            states.append(state)
        return states


def stage_forward(stage: Stage, tap, embedding, protos: PrototypeSet, model: PGPSam, previous: StageState | None) -> StageState:
    F_I = stage.enhance(tap)
    if previous is None:
        F_M = softmax(model.class_head(F_I), axis=-1)
    else:
        F_M = softmax(previous.low_logits.movedim(-3, -1), axis=-1)
    if stage.ppr is not None:
        protos, _, _ = stage.ppr(protos, F_I, F_M)
    prompts = stage.ppg(F_I, protos.intra, protos.inter)
    low = model.decoder(embedding, prompts)
    return StageState(F_I, F_M, protos, prompts, low, upsample_logits(low, model.cfg.image_size))


def predict(model: PGPSam, images: torch.Tensor) -> torch.Tensor:
    """Argmax class map of the final stage, ``(..., H, W)`` uint8."""
    with torch.no_grad():
        return model(images)[-1].logits.argmax(dim=-3).to(torch.uint8)


# --------------------------------------------------------------------------- loss & metrics


@dataclass
class LossReport:
    ce: float
    dice_loss: float
    total: float
    per_stage: list[dict] = field(default_factory=list)


def soft_dice_loss(probs: torch.Tensor, onehot: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """``1 - mean_{sample, class} (2 sum(p y) + eps) / (sum p + sum y + eps)``; inputs ``(B, N, H, W)``."""
    inter = (probs * onehot).sum(dim=(-1, -2))
    denom = probs.sum(dim=(-1, -2)) + onehot.sum(dim=(-1, -2))
    return 1.0 - ((2.0 * inter + eps) / (denom + eps)).mean()


def loss_ce_dice(
    stage_logits: list[torch.Tensor],
    labels: torch.Tensor,
    lambda_ce: float = 0.5,
    lambda_dice: float = 0.5,
    stage_weights: tuple[float, ...] = (0.5, 0.5),
    eps: float = 1e-5,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted CE + soft Dice over stages; returns the differentiable total and a float report."""
    if len(stage_weights) != len(stage_logits):
        raise ConfigError(f"{len(stage_weights)} stage weights for {len(stage_logits)} stages")
    n = stage_logits[0].shape[-3]
    labels = labels.long()
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n):
        raise DataError(f"label values must lie in [0, {n}), found [{int(labels.min())}, {int(labels.max())}]")
    batched = labels.dim() == 3
    onehot = F.one_hot(labels, n).movedim(-1, -3).to(stage_logits[0].dtype)
    total = stage_logits[0].new_zeros(())
    ce_sum = dice_sum = 0.0
    per_stage = []
    for wgt, logits in zip(stage_weights, stage_logits):
        lg = logits if batched else logits.unsqueeze(0)
        oh = onehot if batched else onehot.unsqueeze(0)
        logp = torch.log_softmax(lg, dim=-3)
        ce = -(logp * oh).sum(dim=-3).mean()
        dice = soft_dice_loss(logp.exp(), oh, eps)
        total = total + wgt * (lambda_ce * ce + lambda_dice * dice)
        ce_v, dice_v = ce.item(), dice.item()
        per_stage.append({"ce": ce_v, "dice_loss": dice_v, "weight": wgt})
        ce_sum += wgt * ce_v
        dice_sum += wgt * dice_v
    return total, LossReport(ce_sum, dice_sum, total.item(), per_stage)


def dice_score(pred: np.ndarray | torch.Tensor, truth: np.ndarray | torch.Tensor, cls: int) -> float:
    """Hard Dice ``2|P & T| / (|P| + |T|)`` for one class; 1.0 when both are empty."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ConfigError(f"dice_score: shape {pred.shape} vs {truth.shape}")
    p, t = pred == cls, truth == cls
    denom = int(p.sum()) + int(t.sum())
    return 1.0 if denom == 0 else 2.0 * int((p & t).sum()) / denom


# --------------------------------------------------------------------------- training


def make_optimizer(model: PGPSam, lr: float = 1e-3, weight_decay: float = 0.1) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.trainable_parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=weight_decay
    )


def train_step(
    model: PGPSam,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    masks: torch.Tensor,
    lambda_ce: float = 0.5,
    lambda_dice: float = 0.5,
    stage_weights: tuple[float, float] = (0.5, 0.5),
    grad_clip: float | None = 1.0,
) -> LossReport:
    """One AdamW update; gradients are rescaled to global norm ``grad_clip`` when it is set."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    states = model(images)
    total, report = loss_ce_dice([s.logits for s in states], masks, lambda_ce, lambda_dice, stage_weights)
    if not math.isfinite(report.total):
        raise NumericError(f"non-finite loss {report.total} (ce={report.ce}, dice={report.dice_loss})")
    total.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), grad_clip)
    optimizer.step()
    return report


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: PGPSam, path: str | Path, extra: dict | None = None) -> None:
    """Layout: uint64-LE header length, UTF-8 JSON header, then float32-LE arrays in header order."""
    state = model.state_dict()
    header = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "seed": model.cfg.seed,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in state.values():
            fh.write(v.detach().cpu().numpy().astype("<f4", copy=False).tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    try:
        (n,) = struct.unpack_from("<Q", raw, 0)
        header = json.loads(raw[8 : 8 + n])
    except (struct.error, ValueError) as exc:
        raise DataError(f"malformed checkpoint header in {path}: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    arrays, offset = {}, 8 + n
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if offset + 4 * count > len(raw):
            raise DataError(f"checkpoint {path} truncated at tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr
        offset += 4 * count
    if offset != len(raw):
        raise DataError(f"checkpoint {path}: {len(raw) - offset} trailing bytes")
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[PGPSam, dict]:
    header, arrays = read_checkpoint(path)
    model = PGPSam(ModelConfig.from_dict(header["model_config"]))
    state = model.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise DataError(f"checkpoint {path} lacks tensors: {sorted(missing)[:5]}")
    model.load_state_dict({k: torch.from_numpy(arrays[k].copy()).to(state[k].dtype) for k in state})
    return model, header
