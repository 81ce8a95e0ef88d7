"""Synthetic captioned-shapes dataset plus COCO-style ingestion.

Layout shared by both paths:

    root/images/<id>.png
    root/masks/<id>.png
    root/captions.jsonl    one object per line: {"id": ..., "captions": [...]}
    root/attributes.jsonl  synthetic ground truth (color, shape, background)
    root/meta.json         image side, palettes, seed

The generator writes a train root and a sibling held-out root whose
(color, shape) pairs never appear in training.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .masks import downsample_mask

log = logging.getLogger(__name__)

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 70),
    "blue": (50, 80, 220),
    "yellow": (230, 210, 50),
}
BACKGROUNDS = {
    "white": (240, 240, 240),
    "gray": (125, 125, 125),
    "black": (15, 15, 15),
    "tan": (205, 175, 140),
}
SHAPES = ("circle", "square", "triangle")
HELDOUT_PAIRS = (
    ("red", "triangle"),
    ("green", "circle"),
    ("blue", "square"),
    ("yellow", "circle"),
)
CAPTION_TEMPLATES = (
    "a {color} {shape} on a {background} background",
    "the {shape} is {color} and sits on a {background} background",
    "there is a {color} {shape} in a {background} scene",
    "a photo of a {color} {shape} placed on {background}",
    "its plain {background} background holds a {color} {shape}",
)


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShapeWorldConfig:
    side: int = 32
    colors: dict = field(default_factory=lambda: dict(COLORS))
    backgrounds: dict = field(default_factory=lambda: dict(BACKGROUNDS))
    shapes: tuple[str, ...] = SHAPES
    heldout_pairs: tuple[tuple[str, str], ...] = HELDOUT_PAIRS
    per_cell: int = 30
    heldout_per_cell: int = 5
    templates: tuple[str, ...] = CAPTION_TEMPLATES
    jitter: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.colors or not self.backgrounds or not self.shapes:
            raise DatasetError("palettes and shape set must be non-empty")
        for color, shape in self.heldout_pairs:
            if color not in self.colors or shape not in self.shapes:
                raise DatasetError(f"held-out pair ({color}, {shape}) not in palettes")


def _shape_mask(shape: str, side: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    if shape == "square":
        return (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
    if shape == "triangle":
        # upward triangle inscribed in the radius box: base plus two slanted sides
        in_base = yy <= cy + radius
        left = (yy - (cy - radius)) >= -2 * (xx - cx)
        right = (yy - (cy - radius)) >= 2 * (xx - cx)
        return in_base & left & right
    raise DatasetError(f"unknown shape {shape!r}")


def _jittered(rgb: tuple[int, int, int], rng: np.random.Generator, jitter: int) -> np.ndarray:
    base = np.asarray(rgb, dtype=np.int64)
    noise = rng.integers(-jitter, jitter + 1, size=3)
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def _render_sample(config: ShapeWorldConfig, color: str, shape: str,
                   background: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    side = config.side
    cx = side / 2 + rng.uniform(-side / 8, side / 8)
    cy = side / 2 + rng.uniform(-side / 8, side / 8)
    radius = rng.uniform(side * 0.22, side * 0.34)
    mask = _shape_mask(shape, side, cx, cy, radius)
    image = np.empty((side, side, 3), dtype=np.uint8)
    image[:] = _jittered(config.backgrounds[background], rng, config.jitter)
    image[mask] = _jittered(config.colors[color], rng, config.jitter)
    return image, mask


def _write_split(root: Path, config: ShapeWorldConfig,
                 cells: list[tuple[str, str, str]], per_cell: int,
                 rng: np.random.Generator) -> int:
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    captions_fh = (root / "captions.jsonl").open("w", encoding="utf-8")
    attrs_fh = (root / "attributes.jsonl").open("w", encoding="utf-8")
    count = 0
    with captions_fh, attrs_fh:
        for color, shape, background in cells:
            for idx in range(per_cell):
                sample_id = f"{color}-{shape}-{background}-{idx:03d}"
                image, mask = _render_sample(config, color, shape, background, rng)
                Image.fromarray(image).save(root / "images" / f"{sample_id}.png")
                Image.fromarray(mask.astype(np.uint8) * 255).save(
                    root / "masks" / f"{sample_id}.png")
                order = rng.permutation(len(config.templates))
                captions = [config.templates[t].format(color=color, shape=shape,
                                                       background=background)
                            for t in order]
                captions_fh.write(json.dumps(
                    {"id": sample_id, "captions": captions}) + "\n")
                attrs_fh.write(json.dumps(
                    {"id": sample_id, "color": color, "shape": shape,
                     "background": background}) + "\n")
                count += 1
    meta = {"side": config.side, "colors": config.colors,
            "backgrounds": config.backgrounds, "shapes": list(config.shapes),
            "heldout_pairs": [list(p) for p in config.heldout_pairs],
            "seed": config.seed}
    (root / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return count


def generate_shapeworld(config: ShapeWorldConfig, out_root) -> tuple[Path, Path]:
    """Writes <out>/train and <out>/heldout; deterministic given the seed."""
    out_root = Path(out_root)
    heldout = set(config.heldout_pairs)
    train_cells = [(c, s, b)
                   for c in sorted(config.colors)
                   for s in config.shapes
                   for b in sorted(config.backgrounds)
                   if (c, s) not in heldout]
    heldout_cells = [(c, s, b)
                     for c in sorted(config.colors)
                     for s in config.shapes
                     for b in sorted(config.backgrounds)
                     if (c, s) in heldout]
    if not train_cells:
        raise DatasetError("held-out pairs cover the whole grid")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    train_root, heldout_root = out_root / "train", out_root / "heldout"
    n_train = _write_split(train_root, config, train_cells, config.per_cell, rng)
    n_held = _write_split(heldout_root, config, heldout_cells,
                          config.heldout_per_cell, rng)
    log.info("shapeworld: %d train / %d held-out samples at %s",
             n_train, n_held, out_root)
    return train_root, heldout_root


def to_model_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float32 [-1,1]."""
    return pixels.astype(np.float32) / 127.5 - 1.0


def from_model_range(values: np.ndarray) -> np.ndarray:
    return np.clip((values + 1.0) * 127.5, 0, 255).round().astype(np.uint8)


def _center_crop_square(img: Image.Image) -> Image.Image:
    w, h = img.size
    if w == h:
        return img
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    return img.crop((left, top, left + side, top + side))


def load_image(path, side: int) -> np.ndarray:
    img = _center_crop_square(Image.open(path).convert("RGB"))
    if img.size != (side, side):
        img = img.resize((side, side), Image.BICUBIC)
    return np.asarray(img, dtype=np.uint8)


def load_mask_array(path, side: int) -> np.ndarray:
    img = _center_crop_square(Image.open(path).convert("L"))
    if img.size != (side, side):
        img = img.resize((side, side), Image.NEAREST)
    return (np.asarray(img) > 127).astype(np.float32)


@dataclass
class SampleSet:
    """Eagerly loaded split: desk-scale data fits in memory comfortably."""

    ids: list[str]
    images: torch.Tensor          # (N, 3, side, side) in [-1, 1]
    masks: torch.Tensor           # (N, 1, side, side) binary
    captions: list[list[str]]
    attributes: dict[str, dict]
    meta: dict

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def side(self) -> int:
        return self.images.shape[-1]


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    if path.exists():
        with path.open(encoding="utf-8") as fh:
            for raw in fh:
                raw = raw.strip()
                if raw:
                    rows.append(json.loads(raw))
    return rows


def ingest_coco_style(root, side: int) -> SampleSet:
    """Indexes root/{images,masks}/ with captions.jsonl; masks binarized
    at threshold 127 and images resized to the finest stage side. Samples
    missing a mask or captions are skipped with a warning.
    """
    root = Path(root)
    caption_rows = _read_jsonl(root / "captions.jsonl")
    if not caption_rows:
        raise DatasetError(f"no captions found under {root}")
    attr_rows = {row["id"]: row for row in _read_jsonl(root / "attributes.jsonl")}
    meta = {}
    meta_path = root / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))

    ids, images, masks, captions = [], [], [], []
    for row in caption_rows:
        sample_id, caps = row.get("id"), row.get("captions") or []
        image_path = root / "images" / f"{sample_id}.png"
        mask_path = root / "masks" / f"{sample_id}.png"
        if not caps:
            log.warning("skipping %s: empty caption list", sample_id)
            continue
        if not image_path.exists() or not mask_path.exists():
            log.warning("skipping %s: missing image or mask file", sample_id)
            continue
        ids.append(sample_id)
        images.append(to_model_range(load_image(image_path, side)))
        masks.append(load_mask_array(mask_path, side))
        captions.append(list(caps))
    if not ids:
        raise DatasetError(f"no usable samples under {root}")
    image_tensor = torch.from_numpy(
        np.stack(images).transpose(0, 3, 1, 2)).contiguous()
    mask_tensor = torch.from_numpy(np.stack(masks)).unsqueeze(1)
    return SampleSet(ids=ids, images=image_tensor, masks=mask_tensor,
                     captions=captions, attributes=attr_rows, meta=meta)


load_dataset = ingest_coco_style


def image_pyramid(images: torch.Tensor, resolutions: tuple[int, ...]) -> list[torch.Tensor]:
    """Area-average downsampling of the finest images to every stage side."""
    finest = images.shape[-1]
    grids = []
    for side in resolutions:
        if finest % side:
            raise DatasetError(f"stage side {side} does not divide {finest}")
        factor = finest // side
        grids.append(images if factor == 1 else F.avg_pool2d(images, factor))
    return grids


def mask_pyramid(masks: torch.Tensor, resolutions: tuple[int, ...]) -> list[torch.Tensor]:
    return [downsample_mask(masks, side) for side in resolutions]


@dataclass(frozen=True)
class EpochPlan:
    """Whole-epoch sample order and caption picks, derived once per epoch
    so a resumed run can skip batches without replaying tensor work.
    """

    epoch: int
    batch_size: int
    order: np.ndarray
    caption_choice: np.ndarray

    @property
    def batches(self) -> int:
        return (len(self.order) + self.batch_size - 1) // self.batch_size

    def batch(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        lo = index * self.batch_size
        hi = min(lo + self.batch_size, len(self.order))
        if lo >= len(self.order):
            raise IndexError(index)
        return self.order[lo:hi], self.caption_choice[lo:hi]


def epoch_plan(n_samples: int, caption_counts: list[int], batch_size: int,
               seed: int, epoch: int) -> EpochPlan:
    if batch_size < 1:
        raise DatasetError("batch size must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, epoch))))
    order = rng.permutation(n_samples)
    choice = np.array([rng.integers(0, caption_counts[i]) for i in order],
                      dtype=np.int64)
    return EpochPlan(epoch=epoch, batch_size=batch_size, order=order,
                     caption_choice=choice)


def batch_stream(samples: SampleSet, batch_size: int, seed: int, epoch: int,
                 skip_batches: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yields (sample indices, caption indices); covers every sample once."""
    plan = epoch_plan(len(samples), [len(c) for c in samples.captions],
                      batch_size, seed, epoch)
    for b in range(skip_batches, plan.batches):
        yield plan.batch(b)
