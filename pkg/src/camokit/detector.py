"""Micro single-stage grid detector.

A stack of 3x3 conv + leaky-ReLU blocks (stride 2 until the feature map
reaches the grid size) followed by a 1x1 head emitting, for every cell and
anchor, ``tx, ty, tw, th, objectness`` and one logit per class.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .boxes import BoundingBox, iou
from .diffcore import Tensor

log = logging.getLogger(__name__)

WEIGHTS_FORMAT = "camokit-weights"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 104
    grid_size: int = 13
    num_anchors: int = 2
    anchor_sizes: tuple = ((0.13, 0.13), (0.26, 0.26))
    num_classes: int = 4
    conv_channels: tuple = (16, 32, 64, 64)
    coord_weight: float = 5.0
    noobj_weight: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "anchor_sizes", tuple(tuple(float(v) for v in a) for a in self.anchor_sizes))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.input_size % self.grid_size:
            raise ValueError(f"input_size {self.input_size} not divisible by grid_size {self.grid_size}")
        stride = self.stride
        if stride & (stride - 1):
            raise ValueError(f"grid stride {stride} must be a power of two")
        if int(math.log2(stride)) > len(self.conv_channels):
            raise ValueError("not enough conv blocks to reach the grid stride")
        if self.num_anchors != len(self.anchor_sizes):
            raise ValueError("num_anchors must equal len(anchor_sizes)")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def stride(self) -> int:
        return self.input_size // self.grid_size

    @property
    def channels_per_anchor(self) -> int:
        return 5 + self.num_classes

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def layer_specs(self) -> list:
        """(name, in_ch, out_ch, kernel, stride) for every conv layer including the head."""
        n_down = int(math.log2(self.stride))
        specs, c_in = [], 3
        for i, c_out in enumerate(self.conv_channels):
            specs.append((f"conv{i}", c_in, c_out, 3, 2 if i < n_down else 1))
            c_in = c_out
        specs.append(("head", c_in, self.num_anchors * self.channels_per_anchor, 1, 1))
        return specs


def patch_detector_config(num_classes: int = 1, **overrides) -> DetectorConfig:
    """Detector config for finding patches: a finer grid and smaller anchors than the vehicle model."""
    kw = dict(num_classes=num_classes, grid_size=26, anchor_sizes=((0.04, 0.04), (0.09, 0.09)))
    kw.update(overrides)
    return DetectorConfig(**kw)


@dataclass
class DetectorWeights:
    config: DetectorConfig
    tensors: dict  # name -> Tensor, insertion ordered

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def parameters(self) -> list:
        return list(self.tensors.values())

    def copy(self) -> "DetectorWeights":
        return DetectorWeights(self.config, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()})

    def frozen(self) -> "DetectorWeights":
        """Same arrays, no gradient tracking."""
        return DetectorWeights(self.config, {k: Tensor(v.data) for k, v in self.tensors.items()})

    def save(self, path) -> None:
        """npz container: one array per tensor plus a JSON ``__meta__`` entry."""
        meta = {
            "format": WEIGHTS_FORMAT,
            "version": WEIGHTS_VERSION,
            "fingerprint": self.fingerprint,
            "config": asdict(self.config),
            "order": list(self.tensors),
        }
        arrays = {name: t.data for name, t in self.tensors.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "DetectorWeights":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("format") != WEIGHTS_FORMAT:
                raise ValueError(f"{path}: not a {WEIGHTS_FORMAT} file")
            if meta.get("version") != WEIGHTS_VERSION:
                raise ValueError(f"{path}: unsupported weights version {meta.get('version')}")
            cfg = DetectorConfig(**meta["config"])
            tensors = {name: Tensor(z[name].copy()) for name in meta["order"]}
        weights = cls(cfg, tensors)
        if weights.fingerprint != meta["fingerprint"]:
            raise ValueError(f"{path}: config fingerprint mismatch")
        _check_shapes(weights)
        return weights


def _check_shapes(weights: DetectorWeights) -> None:
    for name, c_in, c_out, k, _ in weights.config.layer_specs():
        for suffix, shape in (("w", (c_out, c_in, k, k)), ("b", (c_out,))):
            t = weights.tensors.get(f"{name}.{suffix}")
            if t is None or t.shape != shape:
                raise ValueError(f"weight {name}.{suffix}: expected shape {shape}, got {None if t is None else t.shape}")


def init_weights(config: DetectorConfig, seed: int = 0, dtype=np.float32) -> DetectorWeights:
    """Uniform(-a, a) kernels with a = sqrt(1 / fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, c_in, c_out, k, _ in config.layer_specs():
        a = math.sqrt(1.0 / (c_in * k * k))
        tensors[f"{name}.w"] = Tensor(rng.uniform(-a, a, (c_out, c_in, k, k)).astype(dtype), requires_grad=True)
        tensors[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
    return DetectorWeights(config, tensors)


def zero_weights(config: DetectorConfig, dtype=np.float32) -> DetectorWeights:
    tensors = {}
    for name, c_in, c_out, k, _ in config.layer_specs():
        tensors[f"{name}.w"] = Tensor(np.zeros((c_out, c_in, k, k), dtype=dtype))
        tensors[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dtype))
    return DetectorWeights(config, tensors)


@dataclass
class GridPrediction:
    """raw: (S, S, B, 5+K) for one image or (N, S, S, B, 5+K) for a batch."""

    raw: Tensor

    @property
    def batched(self) -> bool:
        return self.raw.ndim == 5

    def as_batch(self) -> Tensor:
        return self.raw if self.batched else self.raw.reshape((1,) + self.raw.shape)

    def objectness(self) -> np.ndarray:
        return dc._stable_sigmoid(self.raw.data[..., 4])


def forward(weights: DetectorWeights, image) -> GridPrediction:
    cfg = weights.config
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3:
        raise dc.DimensionError(f"detector expects (3, H, W) or (N, 3, H, W) input, got {x.shape}")
    if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise dc.DimensionError(
            f"detector input must be {cfg.input_size}x{cfg.input_size}, got {x.shape[2]}x{x.shape[3]}")
    wdtype = weights.tensors["head.w"].dtype
    if x.dtype != wdtype and not x.requires_grad:
        x = Tensor(x.data.astype(wdtype))
    specs = cfg.layer_specs()
    for name, _, _, k, stride in specs[:-1]:
        x = dc.conv2d(x, weights.tensors[f"{name}.w"], weights.tensors[f"{name}.b"], stride=stride, padding=k // 2)
        x = dc.leaky_relu(x)
    x = dc.conv2d(x, weights.tensors["head.w"], weights.tensors["head.b"])
    n, s = x.shape[0], cfg.grid_size
    x = x.reshape((n, cfg.num_anchors, cfg.channels_per_anchor, s, s))
    raw = dc.transpose(x, (0, 3, 4, 1, 2))
    if single:
        raw = raw.reshape(raw.shape[1:])
    return GridPrediction(raw)


# -- decoding ----------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    objectness: float
    class_id: int
    class_conf: float
    score: float


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode(pred: GridPrediction, conf_thresh: float, config: DetectorConfig) -> list:
    """Detections with score = objectness * class confidence >= conf_thresh (single image)."""
    if not 0.0 <= conf_thresh <= 1.0:
        raise ValueError("conf_thresh must be in [0, 1]")
    raw = np.asarray(pred.raw.data, dtype=np.float64)
    if raw.ndim == 5:
        if raw.shape[0] != 1:
            raise dc.DimensionError("decode takes a single-image prediction")
        raw = raw[0]
    s = config.grid_size
    obj = dc._stable_sigmoid(raw[..., 4])
    probs = _softmax(raw[..., 5:])
    cls = probs.argmax(axis=-1)
    cls_conf = np.take_along_axis(probs, cls[..., None], axis=-1)[..., 0]
    score = obj * cls_conf
    dets = []
    for i, j, a in zip(*np.nonzero(score >= conf_thresh)):
        tx, ty, tw, th = raw[i, j, a, :4]
        aw, ah = config.anchor_sizes[a]
        cx = (j + dc._stable_sigmoid(np.float64(tx))) / s
        cy = (i + dc._stable_sigmoid(np.float64(ty))) / s
        w = float(min(1.0, aw * math.exp(min(tw, 20.0))))
        h = float(min(1.0, ah * math.exp(min(th, 20.0))))
        sc = float(score[i, j, a])
        box = BoundingBox(int(cls[i, j, a]), float(cx), float(cy), w, h, confidence=sc)
        dets.append(Detection(box, float(obj[i, j, a]), int(cls[i, j, a]), float(cls_conf[i, j, a]), sc))
    return dets


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def best_anchor(box: BoundingBox, config: DetectorConfig) -> int:
    """Anchor whose (w, h) has the best centred IOU with the box."""
    best, best_iou = 0, -1.0
    for a, (aw, ah) in enumerate(config.anchor_sizes):
        inter = min(aw, box.w) * min(ah, box.h)
        v = inter / (aw * ah + box.w * box.h - inter)
        if v > best_iou:
            best, best_iou = a, v
    return best


def assign_cell(box: BoundingBox, config: DetectorConfig) -> tuple:
    s = config.grid_size
    return min(int(box.cy * s), s - 1), min(int(box.cx * s), s - 1)


def encode(box: BoundingBox, config: DetectorConfig) -> tuple:
    """(row, col, anchor, tx, ty, tw, th) such that decoding recovers the box."""
    s = config.grid_size
    i, j = assign_cell(box, config)
    a = best_anchor(box, config)
    aw, ah = config.anchor_sizes[a]
    ox = min(max(box.cx * s - j, 1e-9), 1 - 1e-9)
    oy = min(max(box.cy * s - i, 1e-9), 1 - 1e-9)
    return i, j, a, _logit(ox), _logit(oy), math.log(box.w / aw), math.log(box.h / ah)


def nms(dets: Sequence[Detection], iou_thresh: float) -> list:
    """Greedy per-class suppression by descending score; ties keep the lower input index."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must be in (0, 1]")
    order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
    kept = []
    for k in order:
        d = dets[k]
        if all(o.class_id != d.class_id or iou(o.box, d.box) < iou_thresh for o in kept):
            kept.append(d)
    return kept


# -- loss ----------------------------------------------------------------------

def build_targets(truths: Sequence[BoundingBox], config: DetectorConfig) -> dict:
    s, b, k = config.grid_size, config.num_anchors, config.num_classes
    pos = np.zeros((s, s, b), dtype=bool)
    xy = np.zeros((s, s, b, 2))
    wh = np.zeros((s, s, b, 2))
    onehot = np.zeros((s, s, b, k))
    for box in truths:
        if box.w <= 0 or box.h <= 0:
            continue
        i, j = assign_cell(box, config)
        a = best_anchor(box, config)
        aw, ah = config.anchor_sizes[a]
        pos[i, j, a] = True
        xy[i, j, a] = (box.cx * s - j, box.cy * s - i)
        wh[i, j, a] = (math.log(box.w / aw), math.log(box.h / ah))
        onehot[i, j, a] = 0
        onehot[i, j, a, box.class_id] = 1
    return {"pos": pos, "xy": xy, "wh": wh, "onehot": onehot}


def detection_loss_terms(pred: GridPrediction, truths, config: DetectorConfig) -> dict:
    """Coordinate, objectness and class terms, summed over anchors and averaged over images.

    ``truths`` is a list of boxes for a single-image prediction, or a list
    of such lists for a batch.
    """
    raw = pred.as_batch()
    if not pred.batched:
        truths = [truths]
    n = raw.shape[0]
    if len(truths) != n:
        raise dc.DimensionError(f"got {len(truths)} label lists for {n} predictions")
    dt = raw.dtype
    targets = [build_targets(t, config) for t in truths]
    pos = np.stack([t["pos"] for t in targets])
    pos2 = np.repeat(pos[..., None], 2, axis=-1).astype(dt)
    xy_t = np.stack([t["xy"] for t in targets]).astype(dt)
    wh_t = np.stack([t["wh"] for t in targets]).astype(dt)
    onehot = np.stack([t["onehot"] for t in targets]).astype(dt)
    obj_w = np.where(pos, 1.0, config.noobj_weight).astype(dt)

    xy = dc.sigmoid(raw[..., 0:2])
    coord = ((xy - xy_t) ** 2 * pos2).sum() + ((raw[..., 2:4] - wh_t) ** 2 * pos2).sum()
    z = raw[..., 4]
    obj = ((dc.softplus(z) - z * pos.astype(dt)) * obj_w).sum()
    cls = -(dc.log_softmax(raw[..., 5:], axis=-1) * onehot).sum()
    scale = 1.0 / n
    return {"coord": coord * (config.coord_weight * scale), "obj": obj * scale, "cls": cls * scale}


def detection_loss(pred: GridPrediction, truths, config: DetectorConfig) -> Tensor:
    terms = detection_loss_terms(pred, truths, config)
    return terms["coord"] + terms["obj"] + terms["cls"]


# -- training ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    flip: bool = True
    burn_in: int = 200
    max_steps: Optional[int] = None

    def lr_at(self, step: int) -> float:
        """Darknet-style warm-up: lr * (step / burn_in) ** 4 for the first burn_in steps."""
        if step < self.burn_in:
            return self.lr * ((step + 1) / self.burn_in) ** 4
        return self.lr


# four times as many cells as the vehicle grid, so the summed loss needs a smaller step
PATCH_DETECTOR_HYPER = TrainConfig(epochs=60, lr=0.00025)


@dataclass
class TrainResult:
    weights: DetectorWeights
    history: list = field(default_factory=list)  # mean loss per epoch


def flip_item(image: np.ndarray, boxes: Sequence[BoundingBox], horizontal: bool, vertical: bool) -> tuple:
    if horizontal:
        image = image[:, :, ::-1]
        boxes = [BoundingBox(b.class_id, 1.0 - b.cx, b.cy, b.w, b.h, b.confidence) for b in boxes]
    if vertical:
        image = image[:, ::-1, :]
        boxes = [BoundingBox(b.class_id, b.cx, 1.0 - b.cy, b.w, b.h, b.confidence) for b in boxes]
    return np.ascontiguousarray(image), list(boxes)


def train_detector(dataset: Sequence, config: DetectorConfig, hyper: TrainConfig = TrainConfig(),
                   init: Optional[DetectorWeights] = None,
                   progress: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """SGD with momentum over (image, boxes) pairs; deterministic for a given seed."""
    if not dataset:
        raise dc.UsageError("train_detector needs a non-empty dataset")
    for item in dataset:
        for b in item.boxes:
            if not 0 <= b.class_id < config.num_classes:
                raise ValueError(f"{item.source_id}: class id {b.class_id} outside {config.num_classes} classes")
    weights = init.copy() if init is not None else init_weights(config, hyper.seed)
    for t in weights.parameters():
        t.requires_grad = True
    params = weights.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(hyper.seed + 1)
    history = []
    step = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start: start + hyper.batch_size]
            images, truths = [], []
            for k in idx:
                item = dataset[int(k)]
                img, boxes = item.image, item.boxes
                if hyper.flip:
                    hf, vf = rng.random(2) < 0.5
                    img, boxes = flip_item(img, boxes, hf, vf)
                images.append(img)
                truths.append(boxes)
            batch = Tensor(np.stack(images).astype(np.float32))
            for p in params:
                p.grad = None
            loss = detection_loss(forward(weights, batch), truths, config)
            loss.backward()
            lr = hyper.lr_at(step)
            for p, v in zip(params, velocity):
                v *= hyper.momentum
                v += p.grad
                p.data = p.data - (lr * v).astype(p.data.dtype)
            losses.append(float(loss.data))
            step += 1
            if hyper.max_steps is not None and step >= hyper.max_steps:
                break
        history.append(float(np.mean(losses)))
        if progress is not None:
            progress(epoch, history[-1])
        log.info("detector epoch %d loss %.4f", epoch, history[-1])
        if hyper.max_steps is not None and step >= hyper.max_steps:
            break
    for p in params:
        p.grad = None
        p.requires_grad = False
    return TrainResult(weights, history)


# -- inference helpers --------------------------------------------------------------

def predict(weights: DetectorWeights, images: Sequence[np.ndarray], conf_thresh: float = 0.25,
            nms_thresh: float = 0.45, batch_size: int = 32) -> list:
    """Decoded + NMS-filtered detections per image."""
    frozen = weights.frozen()
    out = []
    for start in range(0, len(images), batch_size):
        chunk = np.stack([np.asarray(im, dtype=np.float32) for im in images[start: start + batch_size]])
        raw = forward(frozen, Tensor(chunk)).raw
        for r in raw.data:
            out.append(nms(decode(GridPrediction(Tensor(r)), conf_thresh, weights.config), nms_thresh))
    return out
