"""Differentiable placement of a square patch onto labeled objects.

Each placement resamples the patch to a side derived from the object's
area, rotates it by a random angle, adds per-pixel noise and a
brightness/contrast jitter, then alpha-composites it centred on the box.
Every random draw is written to a jitter log so a placement can be
replayed exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from . import diffcore as dc
from .boxes import BoundingBox
from .diffcore import Tensor

log = logging.getLogger(__name__)

MIN_SIDE = 2


@dataclass
class Patch:
    pixels: np.ndarray  # (3, P, P) in [0, 1]
    name: str = ""

    @property
    def size(self) -> int:
        return self.pixels.shape[-1]

    def is_grayscale(self) -> bool:
        return bool(np.all(self.pixels[0] == self.pixels[1]) and np.all(self.pixels[1] == self.pixels[2]))

    def save_png(self, path) -> None:
        arr = np.round(np.clip(self.pixels, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(path)

    @classmethod
    def load_png(cls, path, name: str = "") -> "Patch":
        path = Path(path)
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except (OSError, ValueError) as exc:
            raise OSError(f"cannot read patch image {path}: {exc}") from None
        return cls(np.ascontiguousarray(arr.transpose(2, 0, 1)), name or path.stem)


@dataclass(frozen=True)
class ApplyConfig:
    size_fraction: float = 0.2
    alpha: float = 1.0
    rotation_range: float = math.radians(20)
    noise_amp: float = 0.1
    brightness: float = 0.1
    contrast: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.size_fraction <= 1:
            raise ValueError(f"size_fraction must be in (0, 1], got {self.size_fraction}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0 <= self.noise_amp <= 0.5:
            raise ValueError(f"noise_amp must be in [0, 0.5], got {self.noise_amp}")

    def without_jitter(self) -> "ApplyConfig":
        return replace(self, rotation_range=0.0, noise_amp=0.0, brightness=0.0, contrast=0.0)


def _image_dims(image_size) -> tuple:
    if isinstance(image_size, int):
        return image_size, image_size
    return tuple(image_size)


def patch_side(box: BoundingBox, size_fraction: float, image_size) -> Optional[int]:
    """Side in pixels of the square patch covering ``size_fraction`` of the box area.

    ``image_size`` is an int or (width, height). Returns None for a box
    with zero area.
    """
    width, height = _image_dims(image_size)
    area = box.w * width * box.h * height
    if area <= 0:
        return None
    return max(MIN_SIDE, int(round(math.sqrt(size_fraction * area))))


def _draw_placement(rng: np.random.Generator, index: int, box: BoundingBox, cfg: ApplyConfig,
                    width: int, height: int) -> dict:
    side = patch_side(box, cfg.size_fraction, (width, height))
    rec = {"index": index, "class_id": box.class_id}
    # draws happen unconditionally so skipping one box never shifts later ones
    rotation = float(rng.uniform(-cfg.rotation_range, cfg.rotation_range)) if cfg.rotation_range else 0.0
    brightness = float(rng.uniform(-cfg.brightness, cfg.brightness)) if cfg.brightness else 0.0
    contrast = float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)) if cfg.contrast else 1.0
    noise_seed = int(rng.integers(2**31))
    if side is None:
        rec.update(skipped=True, reason="degenerate_box")
        return rec
    rec.update(
        skipped=False,
        center=(box.cy * height - 0.5, box.cx * width - 0.5),
        side=side,
        rotation=rotation,
        brightness=brightness,
        contrast=contrast,
        noise_amp=cfg.noise_amp,
        noise_seed=noise_seed,
    )
    return rec


def _place(image: Tensor, patch: Tensor, rec: dict, alpha: float) -> Tensor:
    _, height, width = image.shape
    side = rec["side"]
    cy, cx = rec["center"]
    half = side / 2 * (math.sqrt(2) if rec["rotation"] else 1.0) + 1
    y0, y1 = max(0, math.floor(cy - half)), min(height, math.ceil(cy + half) + 1)
    x0, x1 = max(0, math.floor(cx - half)), min(width, math.ceil(cx + half) + 1)
    if y1 <= y0 or x1 <= x0:
        return image
    sampled, mask = dc.affine_sample(patch, rec["rotation"], side / patch.shape[-1],
                                     (y1 - y0, x1 - x0), center=(cy - y0, cx - x0))
    if rec["noise_amp"]:
        noise = np.random.default_rng(rec["noise_seed"]).uniform(-rec["noise_amp"], rec["noise_amp"], sampled.shape)
        sampled = sampled + noise.astype(sampled.dtype)
    if rec["contrast"] != 1.0:
        sampled = sampled * rec["contrast"]
    if rec["brightness"]:
        sampled = sampled + rec["brightness"]
    if rec["noise_amp"] or rec["contrast"] != 1.0 or rec["brightness"]:
        sampled = dc.clamp(sampled, 0.0, 1.0)
    region = (slice(None), slice(y0, y1), slice(x0, x1))
    crop = image[region]
    blended = dc.alpha_composite(crop, sampled, mask, alpha)
    return dc.put(image, blended, region)


def apply_patches(image, boxes: Sequence[BoundingBox], patch, cfg: ApplyConfig,
                  target_classes: Optional[Iterable[int]] = None) -> tuple:
    """Composite ``patch`` onto every box whose class is in ``target_classes``.

    ``image`` is an array or Tensor (3, H, W); ``patch`` a Patch, array or
    Tensor (3, P, P). With ``target_classes=None`` every box is a target.
    Returns (Tensor image, jitter log); the image is differentiable with
    respect to a patch Tensor that requires grad. Later boxes composite
    over earlier ones.
    """
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if isinstance(patch, Patch):
        patch = patch.pixels
    ptensor = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, dtype=img.dtype))
    _, height, width = img.shape
    targets = None if target_classes is None else set(target_classes)
    rng = np.random.default_rng(cfg.seed)
    jitter = []
    for i, box in enumerate(boxes):
        if targets is not None and box.class_id not in targets:
            continue
        rec = _draw_placement(rng, i, box, cfg, width, height)
        rec["alpha"] = cfg.alpha
        jitter.append(rec)
        if rec["skipped"]:
            log.warning("skipping patch placement on degenerate box %d: %s", i, box)
            continue
        img = _place(img, ptensor, rec, cfg.alpha)
    return img, jitter


def replay(image, patch, jitter: Sequence[dict]) -> Tensor:
    """Re-create an apply_patches output from its jitter log."""
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if isinstance(patch, Patch):
        patch = patch.pixels
    ptensor = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, dtype=img.dtype))
    for rec in jitter:
        if not rec.get("skipped"):
            img = _place(img, ptensor, rec, rec["alpha"])
    return img


def format_jitter(jitter: Sequence[dict]) -> str:
    """One ``key=value`` line per placement."""
    lines = []
    for rec in jitter:
        parts = []
        for k, v in rec.items():
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            parts.append(f"{k}={v}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_jitter(text: str) -> list:
    recs = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = {}
        for token in line.split():
            k, v = token.split("=", 1)
            if k == "center":
                rec[k] = tuple(float(x) for x in v.split(","))
            elif k in ("skipped",):
                rec[k] = v == "True"
            elif k in ("index", "class_id", "side", "noise_seed"):
                rec[k] = int(v)
            elif k == "reason":
                rec[k] = v
            else:
                rec[k] = float(v)
        recs.append(rec)
    return recs
