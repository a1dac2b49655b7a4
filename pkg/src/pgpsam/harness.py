"""Few-shot training, evaluation and the module ablation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import Dataset, SegSample, few_shot_subset, generate_dataset, load_dataset
from .errors import DataError
from .numerics import GradCheckReport, grad_check, make_rng
from .pipeline import (
    ModelConfig,
    PGPSam,
    dice_score,
    load_checkpoint,
    loss_ce_dice,
    make_optimizer,
    predict,
    save_checkpoint,
    train_step,
)

log = logging.getLogger(__name__)

METRICS_VERSION = 1
_BATCH_STREAM = 30

# Table-3 row pattern: (cfm, ppg, ppr)
ABLATION_ROWS = [(False, False, False), (True, False, False), (True, True, False), (True, True, True)]


@dataclass
class MetricsReport:
    run_id: str
    config: dict
    n_train_used: int
    train_ids: list[str]
    per_class_dice: dict[str, float]
    mean_dice: float
    loss_curve: list[list[float]] = field(default_factory=list)
    wall_clock_s: float = 0.0

    def to_json(self) -> dict:
        """Deterministic payload; wall-clock lives in timing.json."""
        d = asdict(self)
        d.pop("wall_clock_s")
        return {"metrics_version": METRICS_VERSION, **d}


def run_id(cfg: RunConfig) -> str:
    """Hash of the experiment definition; where results are written is not part of it."""
    d = cfg.to_dict()
    d.pop("out_dir")
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def stack(samples: list[SegSample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples])).to(torch.get_default_dtype())
    masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))
    return images, masks


def prepare_dataset(cfg: RunConfig) -> Dataset:
    """Load ``cfg.data_dir``; without one, generate (once) under ``<out_dir>/data``."""
    if cfg.data_dir is not None:
        return load_dataset(cfg.data_dir)
    root = Path(cfg.out_dir) / "data"
    if (root / "manifest.json").is_file():
        ds = load_dataset(root)
        if ds.manifest.get("seed") == cfg.dataset_seed and len(ds.train) == cfg.train_size:
            return ds
    return generate_dataset(
        root, cfg.dataset_seed, n_classes=cfg.n_classes, image_size=cfg.image_size,
        train_size=cfg.train_size, test_size=cfg.test_size,
        class_fraction=cfg.class_fraction, noise_std=cfg.noise_std,
    )


def lr_lambda(cfg: RunConfig):
    warm = max(1, int(round(cfg.warmup_frac * cfg.steps)))

    def f(step: int) -> float:
        scale = min(1.0, (step + 1) / warm)
        if cfg.lr_decay == "cosine" and step >= warm:
            scale *= 0.5 * (1 + math.cos(math.pi * (step - warm) / max(1, cfg.steps - warm)))
        return scale

    return f


def train_model(cfg: RunConfig, train: list[SegSample], seed: int | None = None) -> tuple[PGPSam, list[list[float]]]:
    seed = cfg.seed if seed is None else seed
    torch.manual_seed(seed)
    model = PGPSam(cfg.model_config(seed))
    opt = make_optimizer(model, cfg.lr, cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda(cfg))
    images, masks = stack(train)
    rng = make_rng(seed, _BATCH_STREAM)
    bs = min(cfg.batch_size, len(train))
    order: list[int] = []
    curve = []
    for step in range(cfg.steps):
        if len(order) < bs:
            order.extend(int(i) for i in rng.permutation(len(train)))
        batch, order = order[:bs], order[bs:]
        report = train_step(
            model, opt, images[batch], masks[batch],
            cfg.lambda_ce, cfg.lambda_dice, tuple(cfg.stage_weights), cfg.grad_clip,
        )
        sched.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            curve.append([step, report.total, report.ce, report.dice_loss])
            log.info("step %d loss %.4f (ce %.4f dice %.4f)", step, report.total, report.ce, report.dice_loss)
    return model, curve


def evaluate(model: PGPSam, samples: list[SegSample], class_names: list[str], batch: int = 25):
    """Per-class foreground Dice averaged over samples, plus the predicted masks."""
    model.eval()
    preds = []
    for i in range(0, len(samples), batch):
        images, _ = stack(samples[i : i + batch])
        preds.append(predict(model, images.to(next(model.parameters()).dtype)).numpy())
    preds = np.concatenate(preds) if preds else np.zeros((0,))
    per_class = {}
    for c in range(1, len(class_names)):
        per_class[class_names[c]] = float(np.mean([dice_score(p, s.mask, c) for p, s in zip(preds, samples)]))
    mean = float(np.mean(list(per_class.values())))
    return per_class, mean, preds


def run_few_shot(cfg: RunConfig, dataset: Dataset | None = None, write: bool = True) -> MetricsReport:
    t0 = time.perf_counter()
    ds = dataset if dataset is not None else prepare_dataset(cfg)
    if ds.manifest["n_classes"] != cfg.n_classes:
        raise DataError(f"dataset has {ds.manifest['n_classes']} classes, config expects {cfg.n_classes}")
    subset = [ds.train[i] for i in few_shot_subset(len(ds.train), cfg.fraction, cfg.seed)]
    log.info("training on %d of %d slices", len(subset), len(ds.train))
    model, curve = train_model(cfg, subset)
    per_class, mean, preds = evaluate(model, ds.test, ds.class_names, cfg.eval_batch)
    report = MetricsReport(
        run_id=run_id(cfg), config=cfg.to_dict(), n_train_used=len(subset),
        train_ids=[s.id for s in subset], per_class_dice=per_class, mean_dice=mean,
        loss_curve=curve, wall_clock_s=time.perf_counter() - t0,
    )
    if write:
        out = Path(cfg.out_dir)
        write_report(report, out)
        save_checkpoint(model, out / "checkpoint.bin", extra={"run_id": report.run_id})
        write_predictions(preds, ds.test, out / "preds")
    return report


def write_report(report: MetricsReport, out: Path, name: str = "metrics.json") -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    (out / "timing.json").write_text(json.dumps({"run_id": report.run_id, "wall_clock_s": report.wall_clock_s}))


def write_predictions(preds: np.ndarray, samples: list[SegSample], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for p, s in zip(preds, samples):
        (out / f"{s.id}.u8").write_bytes(p.astype(np.uint8).tobytes())


def run_eval(cfg: RunConfig, checkpoint: str | Path) -> MetricsReport:
    t0 = time.perf_counter()
    model, header = load_checkpoint(checkpoint)
    ds = prepare_dataset(cfg)
    per_class, mean, preds = evaluate(model, ds.test, ds.class_names, cfg.eval_batch)
    report = MetricsReport(
        run_id=header.get("extra", {}).get("run_id", run_id(cfg)), config=cfg.to_dict(),
        n_train_used=0, train_ids=[], per_class_dice=per_class, mean_dice=mean,
        wall_clock_s=time.perf_counter() - t0,
    )
    out = Path(cfg.out_dir)
    write_report(report, out, "eval_metrics.json")
    write_predictions(preds, ds.test, out / "preds")
    return report


def run_ablation(cfg: RunConfig) -> list[dict]:
    """The four module-toggle configurations, each trained for every seed in ``ablation_seeds``."""
    out = Path(cfg.out_dir)
    ds = prepare_dataset(cfg)
    rows = []
    for cfm, ppg, ppr in ABLATION_ROWS:
        per_seed = []
        for s in cfg.ablation_seeds:
            run_cfg = cfg.replace(use_cfm=cfm, use_ppg=ppg, use_ppr=ppr, seed=s, data_seed=cfg.dataset_seed)
            rep = run_few_shot(run_cfg, ds, write=False)
            log.info("ablation cfm=%d ppg=%d ppr=%d seed=%d dice=%.4f", cfm, ppg, ppr, s, rep.mean_dice)
            per_seed.append(rep)
        names = list(per_seed[0].per_class_dice)
        rows.append({
            "cfm": cfm, "ppg": ppg, "ppr": ppr,
            "dice_mean": float(np.mean([r.mean_dice for r in per_seed])),
            "dice_per_class": {n: float(np.mean([r.per_class_dice[n] for r in per_seed])) for n in names},
            "per_seed": {str(s): r.mean_dice for s, r in zip(cfg.ablation_seeds, per_seed)},
        })
    write_ablation(rows, out)
    return rows


def write_ablation(rows: list[dict], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    names = list(rows[0]["dice_per_class"])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cfm", "ppg", "ppr", "dice_mean", *[f"dice_{n}" for n in names]])
        for r in rows:
            w.writerow([int(r["cfm"]), int(r["ppg"]), int(r["ppr"]), f"{r['dice_mean']:.6f}",
                        *[f"{r['dice_per_class'][n]:.6f}" for n in names]])
    (out / "ablation.json").write_text(json.dumps({"metrics_version": METRICS_VERSION, "rows": rows}, indent=2))


# --------------------------------------------------------------------------- gradient check

GRADCHECK_MODEL = dict(
    n_classes=3, image_size=8, patch=1, channels=8, blocks=4, heads=2, alpha=8, k_select=2, strip_k=3,
)


def full_model_grad_check(seed: int = 0, eps: float = 1e-5, max_elements: int = 10_000) -> GradCheckReport:
    """Central differences vs autograd for the two-stage CE+Dice loss on an 8x8, N=3 sample (float64)."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        model = PGPSam(ModelConfig(seed=seed, **GRADCHECK_MODEL))
        perturb_adapters(model, seed)
        g = make_rng(seed, 40)
        image = torch.from_numpy(g.uniform(0, 1, (1, 8, 8)))
        labels = torch.from_numpy(g.integers(0, 3, (8, 8)))

        def loss():
            states = model(image)
            return loss_ce_dice([s.logits for s in states], labels)[0]

        return grad_check(loss, model.trainable_parameters(), eps=eps, max_elements=max_elements, seed=seed)
    finally:
        torch.set_default_dtype(prev)


def perturb_adapters(model: PGPSam, seed: int, scale: float = 0.1) -> None:
    """Give the zero-initialised LoRA up-projections random values so every factor gets a gradient."""
    g = make_rng(seed, 41)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".up"):
                p.copy_(torch.from_numpy(g.normal(0, scale, tuple(p.shape))))
