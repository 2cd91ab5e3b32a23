"""Dataset preparation: synthetic overhead scenes, tiling, class filtering,
patch-overlay datasets for the patch detector, and label statistics.

Images are float32 arrays shaped (3, H, W) with values in [0, 1]. On disk a
dataset is a directory with ``images/<stem>.png``, ``labels/<stem>.txt``
(one ``class_id cx cy w h`` line per box, normalized) and ``dataset.json``
listing the class names and split membership.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .boxes import BoundingBox
from .patcher import apply_patches

log = logging.getLogger(__name__)

VEHICLE_CLASSES = ("bus", "car", "truck", "van")
VISDRONE_CLASSES = (
    "pedestrian", "people", "bicycle", "car", "van", "truck",
    "tricycle", "awning-tricycle", "bus", "motor", "others",
)
MIN_RETAINED_FRACTION = 0.4


@dataclass(frozen=True)
class ClassMap:
    names: tuple = VEHICLE_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"class names must be unique: {self.names}")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class LabeledImage:
    image: np.ndarray
    boxes: list
    source_id: str = ""
    flags: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


# -- synthetic scenes ---------------------------------------------------------

@dataclass(frozen=True)
class VehiclePrior:
    color: tuple
    length: tuple  # pixel range of the long side
    width: tuple   # pixel range of the short side


DEFAULT_PRIORS = (
    VehiclePrior((0.95, 0.80, 0.10), (26, 34), (11, 14)),  # bus
    VehiclePrior((0.15, 0.35, 0.95), (13, 17), (8, 10)),   # car
    VehiclePrior((0.90, 0.15, 0.10), (20, 26), (10, 13)),  # truck
    VehiclePrior((0.15, 0.80, 0.30), (15, 19), (11, 13)),  # van
)


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 104
    n_objects: tuple = (2, 6)
    class_probs: tuple = (0.15, 0.45, 0.2, 0.2)
    priors: tuple = DEFAULT_PRIORS
    clutter: int = 6
    color_jitter: float = 0.08
    margin: int = 2


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform([0.30, 0.30, 0.25], [0.50, 0.48, 0.40])
    coarse = rng.normal(0.0, 0.06, (3, 5, 5))
    # smooth large-scale variation via nearest upsample + box blur
    reps = math.ceil(size / 5)
    low = np.kron(coarse, np.ones((1, reps, reps)))[:, :size, :size]
    kernel = np.ones(9) / 9
    for axis in (1, 2):
        low = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), axis, low)
    fine = rng.normal(0.0, 0.025, (3, size, size))
    return base[:, None, None] + low + fine


def synth_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> LabeledImage:
    """Textured ground with axis-aligned colored "vehicles" and small distractors."""
    rng = np.random.default_rng(seed)
    s = cfg.image_size
    img = _background(rng, s)
    for _ in range(cfg.clutter):
        r = int(rng.integers(1, 4))
        y, x = rng.integers(0, s, size=2)
        color = rng.uniform(0.1, 0.9, 3)
        img[:, max(0, y - r): y + r, max(0, x - r): x + r] = color[:, None, None]
    lo, hi = cfg.n_objects if isinstance(cfg.n_objects, tuple) else (cfg.n_objects, cfg.n_objects)
    n = int(rng.integers(lo, hi + 1))
    occupied = np.zeros((s, s), dtype=bool)
    boxes = []
    probs = np.asarray(cfg.class_probs, dtype=np.float64)
    probs = probs / probs.sum()
    for _ in range(n):
        cls = int(rng.choice(len(probs), p=probs))
        prior = cfg.priors[cls]
        length = int(rng.integers(prior.length[0], prior.length[1] + 1))
        width = int(rng.integers(prior.width[0], prior.width[1] + 1))
        bw, bh = (length, width) if rng.random() < 0.5 else (width, length)
        color = np.clip(np.asarray(prior.color) + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
        for _attempt in range(20):
            x0 = int(rng.integers(0, s - bw + 1))
            y0 = int(rng.integers(0, s - bh + 1))
            m = cfg.margin
            if not occupied[max(0, y0 - m): y0 + bh + m, max(0, x0 - m): x0 + bw + m].any():
                break
        else:
            continue
        occupied[y0: y0 + bh, x0: x0 + bw] = True
        img[:, y0: y0 + bh, x0: x0 + bw] = color[:, None, None]
        # darker windshield band on the leading end
        if bw >= bh:
            img[:, y0 + 1: y0 + bh - 1, x0 + 2: x0 + 4] *= 0.55
        else:
            img[:, y0 + 2: y0 + 4, x0 + 1: x0 + bw - 1] *= 0.55
        boxes.append(BoundingBox.from_pixels(cls, x0, y0, x0 + bw, y0 + bh, s, s))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return LabeledImage(img, boxes, source_id=f"synth_{seed:06d}")


def synth_dataset(n: int, seed: int, cfg: SceneConfig = SceneConfig()) -> list:
    seeds = np.random.SeedSequence(seed).generate_state(n) if n else []
    return [synth_scene(int(s), cfg) for s in seeds]


# -- tiling -----------------------------------------------------------------

def _window_starts(extent: int, window: int, step: int) -> list:
    if extent <= window:
        return [0]
    starts = list(range(0, extent - window + 1, step))
    if starts[-1] + window < extent:
        starts.append(extent - window)  # edge window shifted inward
    return starts


def tile(item: LabeledImage, window: int = 416, overlap: int = 0,
         min_retained: float = MIN_RETAINED_FRACTION) -> list:
    """Cut an image into full-size square windows with clipped, re-normalized labels.

    A box is kept in a tile when at least ``min_retained`` of its area
    survives clipping. Images smaller than the window become one zero-padded
    tile flagged with ``padded=True``.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    if not 0 <= overlap < window:
        raise ValueError("overlap must satisfy 0 <= overlap < window")
    _, h, w = item.image.shape
    step = window - overlap
    tiles = []
    for ty in _window_starts(h, window, step):
        for tx in _window_starts(w, window, step):
            crop = item.image[:, ty: ty + window, tx: tx + window]
            flags = {"origin": (tx, ty)}
            if crop.shape[1:] != (window, window):
                padded = np.zeros((item.image.shape[0], window, window), dtype=item.image.dtype)
                padded[:, : crop.shape[1], : crop.shape[2]] = crop
                crop = padded
                flags["padded"] = True
            boxes = []
            for b in item.boxes:
                x0, y0, x1, y1 = b.to_pixels(w, h)
                cx0, cy0 = max(x0, tx), max(y0, ty)
                cx1, cy1 = min(x1, tx + window), min(y1, ty + window)
                if cx1 <= cx0 or cy1 <= cy0:
                    continue
                kept = (cx1 - cx0) * (cy1 - cy0) / ((x1 - x0) * (y1 - y0))
                if kept < min_retained:
                    continue
                boxes.append(BoundingBox.from_pixels(b.class_id, cx0 - tx, cy0 - ty, cx1 - tx, cy1 - ty,
                                                     window, window, b.confidence))
            tiles.append(LabeledImage(np.ascontiguousarray(crop), boxes,
                                      f"{item.source_id}__{tx}_{ty}", flags))
    return tiles


def tile_to_global(box: BoundingBox, origin: tuple, window: int, width: int, height: int) -> BoundingBox:
    """Map a tile-normalized box back to the normalized frame of the source image."""
    tx, ty = origin
    x0, y0, x1, y1 = box.to_pixels(window, window)
    return BoundingBox.from_pixels(box.class_id, x0 + tx, y0 + ty, x1 + tx, y1 + ty, width, height, box.confidence)


# -- class filtering -----------------------------------------------------------

def filter_classes(data: Sequence[LabeledImage], source: ClassMap, keep: ClassMap) -> list:
    """Drop boxes whose class is not in ``keep`` and remap ids to ``keep`` order."""
    remap = {source.index(n): keep.index(n) for n in keep.names if n in source.names}
    out = []
    for item in data:
        boxes = [b.with_class(remap[b.class_id]) for b in item.boxes if b.class_id in remap]
        out.append(LabeledImage(item.image, boxes, item.source_id, dict(item.flags)))
    return out


# -- patch overlay datasets -----------------------------------------------------

def overlay_patch_dataset(data: Sequence[LabeledImage], patches: Sequence, cfg,
                          label_mode: str = "single_class", seed: int = 0,
                          target_classes: Optional[Iterable[int]] = None) -> list:
    """Paste one randomly chosen patch on every vehicle and label the placements.

    ``cfg`` is a single ApplyConfig or one per patch. Emitted boxes are the
    patch placement squares, labeled 0 (``single_class``) or with the
    patch's library index (``per_patch_class``).
    """
    if not patches:
        raise ValueError("overlay_patch_dataset needs at least one patch")
    if label_mode not in ("single_class", "per_patch_class"):
        raise ValueError(f"unknown label_mode {label_mode!r}")
    cfgs = list(cfg) if isinstance(cfg, (list, tuple)) else [cfg] * len(patches)
    if len(cfgs) != len(patches):
        raise ValueError("need one ApplyConfig per patch")
    rng = np.random.default_rng(seed)
    targets = None if target_classes is None else set(target_classes)
    out = []
    for item in data:
        img = item.image
        labels = []
        for k, box in enumerate(item.boxes):
            choice = int(rng.integers(len(patches)))
            if targets is not None and box.class_id not in targets:
                continue
            step_seed = int(rng.integers(2**31))
            patched, jitter = apply_patches(img, [box], patches[choice], replace(cfgs[choice], seed=step_seed))
            img = patched.data if hasattr(patched, "data") else patched
            for rec in jitter:
                if rec.get("skipped"):
                    continue
                label = 0 if label_mode == "single_class" else choice
                labels.append(rec_box(rec, label, item.width, item.height))
        out.append(LabeledImage(np.asarray(img, dtype=np.float32), labels, item.source_id + "__patched"))
    return out


def rec_box(rec: dict, class_id: int, width: int, height: int) -> BoundingBox:
    """Placement square of a jitter-log record as a normalized box, clipped to the image."""
    cy, cx = rec["center"]
    half = rec["side"] / 2
    x0, y0 = max(0.0, cx + 0.5 - half), max(0.0, cy + 0.5 - half)
    x1, y1 = min(float(width), cx + 0.5 + half), min(float(height), cy + 0.5 + half)
    return BoundingBox.from_pixels(class_id, x0, y0, x1, y1, width, height)


# -- statistics ------------------------------------------------------------------

@dataclass
class DatasetStats:
    n_images: int
    class_counts: dict
    n_labels: int
    labels_per_image_median: Optional[float]
    labels_per_image_max: Optional[int]
    extent_median_px: Optional[float]
    extent_std_px: Optional[float]

    @property
    def undefined(self) -> bool:
        return self.labels_per_image_median is None or self.extent_median_px is None

    def rows(self) -> list:
        rows = [("n_images", self.n_images), ("n_labels", self.n_labels),
                ("labels_per_image_median", self.labels_per_image_median),
                ("labels_per_image_max", self.labels_per_image_max),
                ("extent_median_px", self.extent_median_px), ("extent_std_px", self.extent_std_px)]
        rows += [(f"count_{name}", c) for name, c in self.class_counts.items()]
        return rows


def stats(data: Sequence[LabeledImage], classes: ClassMap = ClassMap()) -> DatasetStats:
    """Per-class counts, labels-per-image median/max and box-extent median/std.

    A box's extent is its longer side in pixels; the std is the population std.
    """
    counts = {name: 0 for name in classes.names}
    per_image, extents = [], []
    for item in data:
        per_image.append(len(item.boxes))
        for b in item.boxes:
            name = classes.names[b.class_id] if b.class_id < len(classes) else str(b.class_id)
            counts[name] = counts.get(name, 0) + 1
            extents.append(max(b.w * item.width, b.h * item.height))
    return DatasetStats(
        n_images=len(per_image),
        class_counts=counts,
        n_labels=int(sum(per_image)),
        labels_per_image_median=float(np.median(per_image)) if per_image else None,
        labels_per_image_max=int(max(per_image)) if per_image else None,
        extent_median_px=float(np.median(extents)) if extents else None,
        extent_std_px=float(np.std(extents)) if extents else None,
    )


# -- disk I/O --------------------------------------------------------------------

def image_to_png(image: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def png_to_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_labels(boxes: Sequence[BoundingBox], path: Path) -> None:
    path.write_text("".join(b.to_line() + "\n" for b in boxes))


def read_labels(path: Path) -> list:
    if not path.exists():
        return []
    boxes = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            boxes.append(BoundingBox.from_line(line))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return boxes


def save_dataset(root, items: Sequence[LabeledImage], classes: ClassMap = ClassMap(), split: str = "train") -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    stems = []
    for item in items:
        stem = item.source_id
        image_to_png(item.image, root / "images" / f"{stem}.png")
        write_labels(item.boxes, root / "labels" / f"{stem}.txt")
        stems.append(stem)
    manifest_path = root / "dataset.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"splits": {}}
    manifest["classes"] = list(classes.names)
    manifest["splits"][split] = stems
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(root, split: Optional[str] = None) -> tuple:
    """Returns (items, ClassMap). Without a split, loads every image under images/."""
    root = Path(root)
    manifest_path = root / "dataset.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        classes = ClassMap(tuple(manifest.get("classes", VEHICLE_CLASSES)))
        if split is not None:
            if split not in manifest.get("splits", {}):
                raise KeyError(f"split {split!r} not in {manifest_path}")
            stems = manifest["splits"][split]
        else:
            stems = [s for names in manifest.get("splits", {}).values() for s in names]
    else:
        classes = ClassMap()
        stems = sorted(p.stem for p in (root / "images").glob("*.png"))
    items = [LabeledImage(png_to_image(root / "images" / f"{s}.png"), read_labels(root / "labels" / f"{s}.txt"), s)
             for s in stems]
    return items, classes
