"""Synthetic few-shot segmentation slices.

Every sample contains one instance of each foreground class.  A class is a
shape family (disk, rectangle, annulus, ...); intensity bands of the
foreground classes overlap, so intensity alone does not identify the class.

On disk::

    <root>/manifest.json
    <root>/images/<id>.f32   little-endian float32, row-major 1 x H x W
    <root>/masks/<id>.u8     uint8, row-major H x W
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .numerics import make_rng

DATASET_FORMAT = "pgpsam-dataset"
DATASET_VERSION = 1
SHAPE_FAMILIES = ("disk", "rectangle", "annulus", "triangle", "cross")

_TRAIN_STREAM, _TEST_STREAM = 10, 11


@dataclass
class SegSample:
    id: str
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in [0, N)


@dataclass
class Dataset:
    root: Path
    manifest: dict
    train: list[SegSample]
    test: list[SegSample]

    @property
    def class_names(self) -> list[str]:
        return self.manifest["class_names"]


def _shape_mask(family: str, size: int, cy: float, cx: float, area: float, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if family == "disk":
        r = math.sqrt(area / math.pi)
        return dy**2 + dx**2 <= r**2
    if family == "annulus":
        r_out = math.sqrt(area / (0.75 * math.pi))
        d2 = dy**2 + dx**2
        return (d2 <= r_out**2) & (d2 > (0.5 * r_out) ** 2)
    if family == "rectangle":
        aspect = rng.uniform(0.6, 1.6)
        w = math.sqrt(area * aspect)
        h = area / w
        return (np.abs(dy) <= h / 2) & (np.abs(dx) <= w / 2)
    if family == "triangle":
        side = math.sqrt(4 * area / math.sqrt(3))
        rad = side / math.sqrt(3)
        theta = rng.uniform(0, 2 * math.pi)
        inside = np.ones_like(dy, dtype=bool)
        for j in range(3):
            # half-plane of each edge, normal pointing away from the centroid
            phi = theta + 2 * math.pi * j / 3 + math.pi / 3
            inside &= dx * math.cos(phi) + dy * math.sin(phi) <= rad / 2
        return inside
    if family == "cross":
        arm = math.sqrt(9 * area / 5)
        t = arm / 3
        return ((np.abs(dy) <= t / 2) & (np.abs(dx) <= arm / 2)) | ((np.abs(dx) <= t / 2) & (np.abs(dy) <= arm / 2))
    raise ConfigError(f"unknown shape family {family!r}")


def _extent(family: str, area: float) -> float:
    """Half-width of a box guaranteed to contain the shape (any rotation/aspect)."""
    if family == "disk":
        return math.sqrt(area / math.pi)
    if family == "annulus":
        return math.sqrt(area / (0.75 * math.pi))
    if family == "rectangle":
        return math.sqrt(area * 1.6) / 2 + 0.5
    if family == "triangle":
        return math.sqrt(4 * area / math.sqrt(3)) / math.sqrt(3)
    return math.sqrt(9 * area / 5) / 2


def intensity_bands(n_classes: int) -> list[tuple[float, float]]:
    """Background band plus foreground bands; neighbours overlap by a fifth of a band width."""
    n_fg = n_classes - 1
    width = 0.65 / (0.8 * n_fg + 0.2)
    bands = [(0.05, 0.25)]
    for c in range(n_fg):
        lo = 0.30 + 0.8 * width * c
        bands.append((lo, lo + width))
    return bands


def make_sample(
    rng: np.random.Generator,
    sample_id: str,
    n_classes: int,
    size: int,
    class_fraction: float,
    noise_std: float,
    margin: int = 2,
) -> SegSample:
    if n_classes - 1 > len(SHAPE_FAMILIES):
        raise ConfigError(f"{n_classes - 1} foreground classes but only {len(SHAPE_FAMILIES)} shape families")
    bands = intensity_bands(n_classes)
    target = class_fraction * size * size
    for _ in range(100):
        boxes, mask, placed = [], np.zeros((size, size), np.uint8), True
        for c in range(1, n_classes):
            family = SHAPE_FAMILIES[c - 1]
            area = target * rng.uniform(0.75, 1.25)
            half = _extent(family, area)
            lo, hi = half + 1, size - half - 1
            if lo >= hi:
                raise ConfigError(f"class_fraction {class_fraction} too large for {size}x{size} images")
            for _ in range(200):
                cy, cx = rng.uniform(lo, hi, size=2)
                box = (cy - half - margin, cy + half + margin, cx - half - margin, cx + half + margin)
                if all(box[1] < b[0] or b[1] < box[0] or box[3] < b[2] or b[3] < box[2] for b in boxes):
                    break
            else:
                placed = False
                break
            boxes.append(box)
            mask[_shape_mask(family, size, cy, cx, area, rng)] = c
        if placed:
            break
    else:
        raise ConfigError("could not place non-overlapping shapes; lower class_fraction")

    levels = np.array([rng.uniform(*band) for band in bands])
    image = levels[mask] + rng.normal(0.0, noise_std, size=(size, size))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    return SegSample(sample_id, image, mask)


def generate_dataset(
    root: str | Path,
    seed: int,
    n_classes: int = 4,
    image_size: int = 64,
    train_size: int = 200,
    test_size: int = 50,
    class_fraction: float = 0.08,
    noise_std: float = 0.05,
) -> Dataset:
    if n_classes < 2:
        raise ConfigError("need background plus at least one foreground class")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    splits = {}
    entries = []
    for split, count, stream in (("train", train_size, _TRAIN_STREAM), ("test", test_size, _TEST_STREAM)):
        rng = make_rng(seed, stream)
        samples = [
            make_sample(rng, f"{split}_{i:04d}", n_classes, image_size, class_fraction, noise_std)
            for i in range(count)
        ]
        for s in samples:
            (root / "images" / f"{s.id}.f32").write_bytes(s.image.astype("<f4").tobytes())
            (root / "masks" / f"{s.id}.u8").write_bytes(s.mask.astype(np.uint8).tobytes())
            entries.append({
                "id": s.id, "split": split,
                "image": f"images/{s.id}.f32", "mask": f"masks/{s.id}.u8",
            })
        splits[split] = samples
    manifest = {
        "format": DATASET_FORMAT,
        "format_version": DATASET_VERSION,
        "seed": seed,
        "rng": "philox4x64-10",
        "n_classes": n_classes,
        "image_size": image_size,
        "image_shape": [1, image_size, image_size],
        "mask_shape": [image_size, image_size],
        "class_names": ["background", *SHAPE_FAMILIES[: n_classes - 1]],
        "class_fraction": class_fraction,
        "noise_std": noise_std,
        "intensity_bands": intensity_bands(n_classes),
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return Dataset(root, manifest, splits["train"], splits["test"])


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DataError(f"dataset manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"{path} is not a {DATASET_FORMAT} manifest")
    img_shape, mask_shape = tuple(manifest["image_shape"]), tuple(manifest["mask_shape"])
    splits: dict[str, list[SegSample]] = {"train": [], "test": []}
    for e in manifest["samples"]:
        try:
            image = np.frombuffer((root / e["image"]).read_bytes(), dtype="<f4").reshape(img_shape)
            mask = np.frombuffer((root / e["mask"]).read_bytes(), dtype=np.uint8).reshape(mask_shape)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read sample {e['id']} under {root}: {exc}") from None
        splits[e["split"]].append(SegSample(e["id"], image.astype(np.float32), mask.copy()))
    return Dataset(root, manifest, splits["train"], splits["test"])


def few_shot_subset(n_train: int, fraction: float, seed: int) -> list[int]:
    """Sorted indices of ``ceil(fraction * n_train)`` training samples; depends only on (seed, fraction)."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"few-shot fraction must lie in (0, 1], got {fraction}")
    k = math.ceil(round(fraction * n_train, 9))
    perm = make_rng(seed, stream=20).permutation(n_train)
    return sorted(int(i) for i in perm[:k])
