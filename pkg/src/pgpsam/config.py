"""Run configuration: one flat, versioned JSON object.

Keys map 1:1 onto :class:`RunConfig` fields.  Unknown keys are rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, DataError
from .pipeline import ModelConfig

CONFIG_VERSION = 1
SEED_ENV = "PGP_SEED"


@dataclass
class RunConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 0
    data_seed: int | None = None  # falls back to seed

    # data
    n_classes: int = 4
    image_size: int = 64
    train_size: int = 200
    test_size: int = 50
    fraction: float = 0.10
    class_fraction: float = 0.08
    noise_std: float = 0.05

    # model
    patch: int = 4
    channels: int = 64
    blocks: int = 4
    heads: int = 4
    lora_rank: int = 4
    alpha: int = 8
    k_select: int = 3
    strip_k: int = 7
    decoder_rounds: int = 2
    use_cfm: bool = True
    use_ppg: bool = True
    use_ppr: bool = True

    # optimisation
    lambda_ce: float = 0.5
    lambda_dice: float = 0.5
    stage_weights: list[float] = field(default_factory=lambda: [0.5, 0.5])
    lr: float = 1e-3
    warmup_frac: float = 0.05
    lr_decay: str = "cosine"
    weight_decay: float = 0.1
    grad_clip: float | None = 1.0
    steps: int = 1500
    batch_size: int = 4

    # harness
    data_dir: str | None = None
    out_dir: str = "runs/default"
    ablation_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    log_every: int = 50
    eval_batch: int = 25

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"config_version {self.config_version} unsupported (expected {CONFIG_VERSION})")
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2 (background + foreground)")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if len(self.stage_weights) != 2:
            raise ConfigError("stage_weights needs one weight per stage (2)")
        if self.lr_decay not in ("cosine", "none"):
            raise ConfigError(f"lr_decay must be 'cosine' or 'none', got {self.lr_decay!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive or null, got {self.grad_clip}")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")

    @property
    def dataset_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def model_config(self, seed: int | None = None) -> ModelConfig:
        return ModelConfig(
            n_classes=self.n_classes, image_size=self.image_size, patch=self.patch,
            channels=self.channels, blocks=self.blocks, heads=self.heads, lora_rank=self.lora_rank,
            alpha=self.alpha, k_select=self.k_select, strip_k=self.strip_k,
            decoder_rounds=self.decoder_rounds, use_cfm=self.use_cfm, use_ppg=self.use_ppg,
            use_ppr=self.use_ppr, seed=self.seed if seed is None else seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def parse_override(item: str) -> tuple[str, object]:
    """``key=value``; the value is read as JSON, falling back to a bare string."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
    environ: dict | None = None,
) -> RunConfig:
    """Defaults < config file < ``--set`` < ``PGP_SEED`` < ``--seed``; ``--out`` sets out_dir."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise DataError(f"config {path} must hold a JSON object")
    for item in overrides or []:
        key, value = parse_override(item)
        data[key] = value
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV):
        try:
            data["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if seed is not None:
        data["seed"] = seed
    if out_dir is not None:
        data["out_dir"] = out_dir
    return RunConfig.from_dict(data)
