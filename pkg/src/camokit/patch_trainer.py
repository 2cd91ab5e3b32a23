"""Optimize an adversarial patch against a frozen detector."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .boxes import BoundingBox
from .detector import DetectorConfig, DetectorWeights, GridPrediction, forward
from .diffcore import Tensor
from .patcher import ApplyConfig, Patch, apply_patches

log = logging.getLogger(__name__)

LOSS_KINDS = ("obj", "cls", "obj_x_cls")
INIT_KINDS = ("random", "gray_flat", "legacy")
CLS_OBJECTNESS_GATE = 0.3
MIN_EPOCHS = 40


@dataclass(frozen=True)
class PatchConfig:
    name: str = "patch"
    loss_kind: str = "obj"
    size_fraction: float = 0.2
    alpha: float = 1.0
    grayscale: bool = False
    init: str = "random"
    legacy_path: Optional[str] = None
    noise_amp: float = 0.1
    rotation_deg: float = 20.0
    min_epochs: int = MIN_EPOCHS
    epochs: Optional[int] = None
    lr: float = 2.0
    lr_decay: float = 0.5
    lr_decay_every: int = 20
    batch_size: int = 8
    tv_weight: float = 0.1
    nps_weight: float = 0.0
    obj_reduction: str = "max"
    patch_size: int = 32
    target_classes: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.init not in INIT_KINDS:
            raise ValueError(f"init must be one of {INIT_KINDS}, got {self.init!r}")
        if self.min_epochs < MIN_EPOCHS:
            raise ValueError(f"min_epochs must be >= {MIN_EPOCHS}")
        if self.epochs is not None and self.epochs < self.min_epochs:
            raise ValueError(f"epochs {self.epochs} below min_epochs {self.min_epochs}")
        if self.obj_reduction not in ("max", "mean"):
            raise ValueError("obj_reduction must be 'max' or 'mean'")
        ApplyConfig(self.size_fraction, self.alpha, noise_amp=self.noise_amp)  # range checks

    @property
    def n_epochs(self) -> int:
        return self.epochs if self.epochs is not None else self.min_epochs

    def apply_config(self, seed: int = 0) -> ApplyConfig:
        return ApplyConfig(size_fraction=self.size_fraction, alpha=self.alpha,
                           rotation_range=math.radians(self.rotation_deg), noise_amp=self.noise_amp, seed=seed)


# -- config files -----------------------------------------------------------------

_CONFIG_KEYS = {
    "name": "name", "loss": "loss_kind", "size": "size_fraction", "alpha": "alpha", "gray": "grayscale",
    "init": "init", "legacy": "legacy_path", "noise": "noise_amp", "epochs": "epochs",
    "min_epochs": "min_epochs", "lr": "lr", "tv_weight": "tv_weight", "nps_weight": "nps_weight",
    "rotation": "rotation_deg", "batch_size": "batch_size", "seed": "seed", "patch_size": "patch_size",
    "obj_reduction": "obj_reduction",
}
_LOSS_ALIASES = {"obj": "obj", "cls": "cls", "obj*cls": "obj_x_cls", "obj * cls": "obj_x_cls", "obj_x_cls": "obj_x_cls"}
_RUN_KEYS = ("weights", "dataset")


def parse_config_text(text: str, source: str = "<config>") -> tuple:
    """Parse flat ``key = value`` lines into (PatchConfig, extras).

    ``extras`` holds the run keys (``weights``, ``dataset``) and any other
    unknown key verbatim. Lines starting with ``#`` are comments.
    """
    kwargs, extras = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            extras[key] = value
            continue
        attr = _CONFIG_KEYS[key]
        try:
            if attr == "loss_kind":
                if value not in _LOSS_ALIASES:
                    raise ValueError(f"unknown loss {value!r}")
                kwargs[attr] = _LOSS_ALIASES[value]
            elif attr == "grayscale":
                kwargs[attr] = value.lower() in ("1", "true", "yes")
            elif attr in ("epochs", "min_epochs", "batch_size", "seed", "patch_size"):
                kwargs[attr] = int(value)
            elif attr in ("size_fraction", "alpha", "noise_amp", "lr", "tv_weight", "nps_weight", "rotation_deg"):
                kwargs[attr] = float(value)
            elif attr == "legacy_path":
                kwargs[attr] = value or None
            else:
                kwargs[attr] = value
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    try:
        return PatchConfig(**kwargs), extras
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from None


def load_config(path) -> tuple:
    path = Path(path)
    return parse_config_text(path.read_text(), str(path))


def format_config(cfg: PatchConfig, extras: Optional[dict] = None) -> str:
    inv = {v: k for k, v in _CONFIG_KEYS.items()}
    lines = []
    for f in fields(PatchConfig):
        if f.name not in inv:
            continue
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if f.name == "loss_kind":
            v = {"obj_x_cls": "obj*cls"}.get(v, v)
        lines.append(f"{inv[f.name]} = {v}")
    for k, v in (extras or {}).items():
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# -- patch init and regularizers -------------------------------------------------

def init_patch(cfg: PatchConfig, size: Optional[int] = None) -> Patch:
    size = size or cfg.patch_size
    if cfg.init == "gray_flat":
        pixels = np.full((3, size, size), 0.5, dtype=np.float32)
    elif cfg.init == "random":
        pixels = np.random.default_rng(cfg.seed).uniform(0, 1, (3, size, size)).astype(np.float32)
    else:
        if not cfg.legacy_path or not Path(cfg.legacy_path).is_file():
            raise FileNotFoundError(f"legacy patch file not found: {cfg.legacy_path}")
        src = Patch.load_png(cfg.legacy_path)
        sh = src.pixels.shape[1]
        if src.pixels.shape[1] != src.pixels.shape[2]:
            raise ValueError(f"legacy patch {cfg.legacy_path} is not square")
        out, _ = dc.affine_sample(Tensor(src.pixels), 0.0, size / sh, (size, size))
        pixels = np.clip(out.data, 0, 1).astype(np.float32)
    if cfg.grayscale:
        pixels = project_grayscale(pixels)
    return Patch(pixels, cfg.name)


def project_grayscale(pixels: np.ndarray) -> np.ndarray:
    return np.repeat(pixels.mean(axis=0, keepdims=True), 3, axis=0).astype(pixels.dtype)


def total_variation(patch) -> Tensor:
    """Mean over horizontally and vertically adjacent pixel pairs of sqrt(diff^2 + 1e-8)."""
    p = patch if isinstance(patch, Tensor) else Tensor(np.asarray(getattr(patch, "pixels", patch)))
    if p.shape[-1] < 2 or p.shape[-2] < 2:
        raise dc.ParameterError("total variation needs a patch of at least 2x2")
    dx = p[:, :, 1:] - p[:, :, :-1]
    dy = p[:, 1:, :] - p[:, :-1, :]
    tx = dc.sqrt(dx * dx + 1e-8).sum()
    ty = dc.sqrt(dy * dy + 1e-8).sum()
    n = int(np.prod(dx.shape) + np.prod(dy.shape))
    return (tx + ty) * (1.0 / n)


def nps(patch, palette: Sequence) -> Tensor:
    """Mean over pixels of the squared RGB distance to the nearest palette colour."""
    palette = np.asarray(palette, dtype=np.float64)
    if palette.size == 0:
        raise dc.ParameterError("palette must not be empty")
    p = patch if isinstance(patch, Tensor) else Tensor(np.asarray(getattr(patch, "pixels", patch)))
    dists = []
    for color in palette.reshape(-1, 3):
        target = np.broadcast_to(color.astype(p.dtype)[:, None, None], p.shape)
        d = p - np.ascontiguousarray(target)
        dists.append((d * d).sum(axis=0).reshape((1,) + p.shape[1:]))
    return dc.min_(dc.concat(dists, axis=0), axis=0).mean()


# -- adversarial objectives ------------------------------------------------------------

def truth_class_map(truths: Sequence[BoundingBox], config: DetectorConfig) -> np.ndarray:
    """(S, S) int array: class of the truth box covering each cell centre, -1 where none."""
    s = config.grid_size
    out = np.full((s, s), -1, dtype=np.int64)
    centres = (np.arange(s) + 0.5) / s
    for b in truths:
        cols = np.nonzero((centres >= b.x0) & (centres <= b.x1))[0]
        rows = np.nonzero((centres >= b.y0) & (centres <= b.y1))[0]
        if len(cols) and len(rows):
            out[np.ix_(rows, cols)] = b.class_id
        else:
            i, j = min(int(b.cy * s), s - 1), min(int(b.cx * s), s - 1)
            out[i, j] = b.class_id
    return out


def adversarial_loss(pred: GridPrediction, kind: str, truths=None, config: Optional[DetectorConfig] = None,
                     reduction: str = "max") -> Tensor:
    """Scalar objective to minimize.

    For a batch, obj and obj_x_cls average the per-image values; cls pools
    the gated anchors of every image into one mean.

    obj        max (or mean) over cells/anchors of sigmoid(objectness)
    cls        mean, over anchors with sigmoid(objectness) > 0.3 in cells
               covered by a truth box, of the softmax probability of that
               box's class
    obj_x_cls  max over anchors of sigmoid(objectness) * top class probability
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    raw = pred.as_batch()
    n = raw.shape[0]
    obj = dc.sigmoid(raw[..., 4])  # N,S,S,B
    if kind == "obj":
        flat = obj.reshape((n, -1))
        per_image = flat.max(axis=1) if reduction == "max" else flat.mean(axis=1)
        return per_image.mean()
    probs = dc.softmax(raw[..., 5:], axis=-1)  # N,S,S,B,K
    if kind == "obj_x_cls":
        top = probs.max(axis=-1)
        return (obj * top).reshape((n, -1)).max(axis=1).mean()
    if config is None or truths is None:
        raise ValueError("cls loss needs truth boxes and the detector config")
    if not pred.batched:
        truths = [truths]
    b = raw.shape[3]
    onehot = np.zeros(probs.shape, dtype=raw.dtype)
    for i, boxes in enumerate(truths):
        cmap = truth_class_map(boxes, config)
        rows, cols = np.nonzero(cmap >= 0)
        for a in range(b):
            onehot[i, rows, cols, a, cmap[rows, cols]] = 1.0
    gate = (obj.data > CLS_OBJECTNESS_GATE)[..., None] & (onehot.sum(axis=-1, keepdims=True) > 0)
    weights = onehot * gate
    count = int(gate.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=raw.dtype))
    return (probs * weights).sum() * (1.0 / count)


# -- training loop ------------------------------------------------------------------

@dataclass
class PatchTrainResult:
    patch: Patch
    history: list = field(default_factory=list)       # epoch-mean adversarial loss
    total_history: list = field(default_factory=list)  # epoch-mean total loss
    grad_norms: list = field(default_factory=list)     # per step
    best_epoch: int = -1


def _check_weights(weights: Optional[DetectorWeights]) -> None:
    if weights is None:
        raise dc.UsageError("train_patch needs trained detector weights")
    if all(not np.any(t.data) for t in weights.tensors.values()):
        raise dc.UsageError("detector weights are all zero; train the detector first")


def train_patch(weights: DetectorWeights, dataset: Sequence, cfg: PatchConfig,
                palette: Optional[Sequence] = None, epochs: Optional[int] = None,
                init: Optional[Patch] = None) -> PatchTrainResult:
    """Gradient descent on the patch pixels only; the detector stays frozen.

    ``epochs`` overrides the configured count (used for reduced-budget smoke
    runs). Returns the patch from the epoch with the lowest mean
    adversarial loss.
    """
    _check_weights(weights)
    if not dataset:
        raise dc.UsageError("train_patch needs a non-empty dataset")
    if cfg.alpha == 0:
        log.warning("patch %s has alpha 0: it is invisible and receives no gradient", cfg.name)
    if cfg.nps_weight and palette is None:
        raise ValueError("nps_weight > 0 needs a palette")
    frozen = weights.frozen()
    n_epochs = epochs if epochs is not None else cfg.n_epochs
    patch = init.pixels.copy() if init is not None else init_patch(cfg).pixels
    if cfg.grayscale:
        patch = project_grayscale(patch)
    rng = np.random.default_rng(cfg.seed + 7919)
    targets = cfg.target_classes
    result = PatchTrainResult(Patch(patch.copy(), cfg.name))
    best = math.inf
    lr = cfg.lr
    for epoch in range(n_epochs):
        if epoch and cfg.lr_decay_every and epoch % cfg.lr_decay_every == 0:
            lr *= cfg.lr_decay
        order = rng.permutation(len(dataset))
        adv_losses, tot_losses = [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[int(k)] for k in order[start: start + cfg.batch_size]]
            ptensor = Tensor(patch, requires_grad=True)
            images = []
            for item in batch:
                img, _ = apply_patches(item.image, item.boxes, ptensor,
                                       cfg.apply_config(seed=int(rng.integers(2**31))), targets)
                images.append(img)
            pred = forward(frozen, dc.stack(images, axis=0))
            adv = adversarial_loss(pred, cfg.loss_kind, [it.boxes for it in batch], weights.config,
                                   cfg.obj_reduction)
            total = adv
            if cfg.tv_weight:
                total = total + total_variation(ptensor) * cfg.tv_weight
            if cfg.nps_weight:
                total = total + nps(ptensor, palette) * cfg.nps_weight
            total.backward()
            grad = ptensor.grad if ptensor.grad is not None else np.zeros_like(patch)
            if cfg.alpha == 0:
                grad = np.zeros_like(patch)  # invisible patch: regularizers alone must not move it
            result.grad_norms.append(float(np.linalg.norm(grad)))
            patch = np.clip(patch - lr * grad, 0.0, 1.0).astype(np.float32)
            if cfg.grayscale:
                patch = project_grayscale(patch)
            adv_losses.append(float(adv.data))
            tot_losses.append(float(total.data))
        mean_adv = float(np.mean(adv_losses))
        result.history.append(mean_adv)
        result.total_history.append(float(np.mean(tot_losses)))
        if mean_adv < best:
            best = mean_adv
            result.patch = Patch(patch.copy(), cfg.name)
            result.best_epoch = epoch
        log.info("patch %s epoch %d adv %.4f", cfg.name, epoch, mean_adv)
    return result
