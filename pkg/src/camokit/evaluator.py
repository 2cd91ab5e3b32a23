"""Scoring: IOU matching, per-class F1 with bootstrap errors, camouflage
sweeps and correlation summaries."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .boxes import BoundingBox, iou
from .dataset import rec_box
from .detector import Detection, DetectorWeights, predict
from .patcher import apply_patches

log = logging.getLogger(__name__)

__all__ = [
    "iou", "match", "f1_report", "bootstrap_sigma", "pearson", "detection_score",
    "mf1_reduction", "run_sweep", "EvalReport", "SweepRow", "SweepReport",
]


class UndefinedMetricError(ValueError):
    """Raised when a statistic is undefined for the given inputs."""


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    assignment: list  # (pred index, truth index)


def _box_and_score(p) -> tuple:
    if isinstance(p, Detection):
        return p.box, p.score
    return p, 1.0 if p.confidence is None else p.confidence


def match(preds: Sequence, truths: Sequence[BoundingBox], iou_thresh: float = 0.5) -> MatchResult:
    """Greedy matching by descending prediction score.

    Each prediction takes the unmatched same-class truth with the highest
    IOU, provided IOU >= iou_thresh. Ties in score keep input order.
    """
    items = [_box_and_score(p) for p in preds]
    order = sorted(range(len(items)), key=lambda k: -items[k][1])
    taken = [False] * len(truths)
    assignment = []
    for k in order:
        box = items[k][0]
        best, best_iou = -1, iou_thresh
        for t, truth in enumerate(truths):
            if taken[t] or truth.class_id != box.class_id:
                continue
            v = iou(box, truth)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = t, v
        if best >= 0:
            taken[best] = True
            assignment.append((k, best))
    tp = len(assignment)
    return MatchResult(tp, len(items) - tp, len(truths) - tp, assignment)


def f1_from_counts(tp, fp, fn):
    """Vectorized precision, recall, F1 with 0/0 -> 0."""
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        r = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return p, r, f


@dataclass
class ClassScore:
    name: str
    precision: float
    recall: float
    f1: float
    sigma: float
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    classes: list  # ClassScore per class
    mf1: float
    mf1_sigma: float
    iou_thresh: float
    outcomes: np.ndarray = field(repr=False, default=None)  # (images, classes, [tp, fp, fn])

    def by_name(self) -> dict:
        return {c.name: c for c in self.classes}

    @property
    def tp(self) -> int:
        return sum(c.tp for c in self.classes)

    @property
    def fp(self) -> int:
        return sum(c.fp for c in self.classes)

    @property
    def fn(self) -> int:
        return sum(c.fn for c in self.classes)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "f1_sigma", "tp", "fp", "fn", "iou_thresh"])
        for c in self.classes:
            w.writerow([c.name, f"{c.precision:.6f}", f"{c.recall:.6f}", f"{c.f1:.6f}", f"{c.sigma:.6f}",
                        c.tp, c.fp, c.fn, self.iou_thresh])
        w.writerow(["mean", "", "", f"{self.mf1:.6f}", f"{self.mf1_sigma:.6f}", self.tp, self.fp, self.fn,
                    self.iou_thresh])
        return buf.getvalue()


def per_image_outcomes(preds_per_image: Sequence, truths_per_image: Sequence, num_classes: int,
                       iou_thresh: float = 0.5) -> np.ndarray:
    if len(preds_per_image) != len(truths_per_image):
        raise ValueError("need one prediction list per truth list")
    out = np.zeros((len(truths_per_image), num_classes, 3), dtype=np.int64)
    for i, (preds, truths) in enumerate(zip(preds_per_image, truths_per_image)):
        m = match(preds, truths, iou_thresh)
        matched_preds = {k for k, _ in m.assignment}
        matched_truths = {t for _, t in m.assignment}
        for k, p in enumerate(preds):
            c = _box_and_score(p)[0].class_id
            if 0 <= c < num_classes:
                out[i, c, 0 if k in matched_preds else 1] += 1
        for t, truth in enumerate(truths):
            if t not in matched_truths:
                out[i, truth.class_id, 2] += 1
    return out


def _mf1_of(counts: np.ndarray) -> np.ndarray:
    """counts (..., classes, 3) summed over images -> (..., classes + 1) F1s, last entry the mean."""
    _, _, f = f1_from_counts(counts[..., 0], counts[..., 1], counts[..., 2])
    return np.concatenate([f, f.mean(axis=-1, keepdims=True)], axis=-1)


def bootstrap_sigma(outcomes, metric: Optional[Callable] = None, n_boot: int = 1000, seed: int = 0) -> np.ndarray:
    """Std of ``metric`` over image-level resamples drawn with replacement.

    ``outcomes`` has one entry per image along axis 0; ``metric`` maps a
    resampled outcome array to a scalar or vector (default: mean over
    images).
    """
    outcomes = np.asarray(outcomes)
    n = outcomes.shape[0]
    if n < 1:
        raise ValueError("bootstrap needs at least one image")
    metric = metric or (lambda o: o.mean(axis=0))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_boot, n))
    values = np.array([np.asarray(metric(outcomes[row]), dtype=np.float64) for row in idx])
    return values.std(axis=0, ddof=1) if n_boot > 1 else np.zeros_like(values[0])


def f1_report(preds_per_image: Sequence, truths_per_image: Sequence, classes, iou_thresh: float = 0.5,
              n_boot: int = 1000, seed: int = 0) -> EvalReport:
    """Per-class P/R/F1 pooled over images; mF1 is the unweighted class mean.

    ``classes`` is a ClassMap, a sequence of names or a class count.
    """
    if isinstance(classes, int):
        names = [str(i) for i in range(classes)]
    else:
        names = list(getattr(classes, "names", classes))
    k = len(names)
    outcomes = per_image_outcomes(preds_per_image, truths_per_image, k, iou_thresh)
    totals = outcomes.sum(axis=0)
    p, r, f = f1_from_counts(totals[:, 0], totals[:, 1], totals[:, 2])
    if n_boot > 1 and len(outcomes):
        sig = bootstrap_sigma(outcomes, lambda o: _mf1_of(o.sum(axis=0)), n_boot, seed)
    else:
        sig = np.zeros(k + 1)
    scores = [ClassScore(names[c], float(p[c]), float(r[c]), float(f[c]), float(sig[c]),
                         int(totals[c, 0]), int(totals[c, 1]), int(totals[c, 2])) for c in range(k)]
    return EvalReport(scores, float(f.mean()) if k else 0.0, float(sig[-1]), iou_thresh, outcomes)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-D sequences of equal length")
    if len(x) < 2:
        raise ValueError("pearson needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("correlation undefined: zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def detection_score(mf1_camo: float, f1_patch: float) -> float:
    """Aggregate detectability: the better of vehicle and patch detection. Lower favours the camouflager."""
    return max(mf1_camo, f1_patch)


def mf1_reduction(baseline_mf1: float, camo_mf1: float) -> float:
    if baseline_mf1 <= 0:
        raise UndefinedMetricError("reduction undefined for a zero baseline")
    return 100.0 * (baseline_mf1 - camo_mf1) / baseline_mf1


# -- sweeps ----------------------------------------------------------------------

SWEEP_COLUMNS = ["name", "size_fraction", "alpha", "mF1_camo", "F1_patch", "detection_score",
                 "mF1_reduction_pct", "baseline_mF1"]


@dataclass
class SweepRow:
    name: str
    size_fraction: float
    alpha: float
    mF1_camo: float
    F1_patch: float
    detection_score: float
    mF1_reduction_pct: float
    baseline_mF1: float = float("nan")


@dataclass
class SweepEntry:
    """One library patch and the placement settings used when scoring it."""

    name: str
    patch: object  # patcher.Patch
    apply: object  # patcher.ApplyConfig


@dataclass
class SweepReport:
    rows: list
    baseline_mf1: float
    correlations: dict

    def to_csv(self) -> str:
        return sweep_to_csv(self.rows)


def sweep_correlations(rows: Sequence[SweepRow]) -> dict:
    out = {}
    pairs = {
        "reduction_vs_size": ("mF1_reduction_pct", "size_fraction"),
        "reduction_vs_alpha": ("mF1_reduction_pct", "alpha"),
        "detection_vs_size": ("detection_score", "size_fraction"),
        "detection_vs_alpha": ("detection_score", "alpha"),
    }
    for key, (a, b) in pairs.items():
        try:
            out[key] = pearson([getattr(r, a) for r in rows], [getattr(r, b) for r in rows])
        except (UndefinedMetricError, ValueError):
            out[key] = float("nan")
    return out


def sweep_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r.name] + [f"{getattr(r, c):.6f}" for c in SWEEP_COLUMNS[1:]])
    return buf.getvalue()


class CsvParseError(ValueError):
    pass


def read_sweep_csv(path) -> list:
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise CsvParseError(f"{path}:1: empty file")
    missing = [c for c in SWEEP_COLUMNS[:-1] if c not in header]
    if missing:
        raise CsvParseError(f"{path}:1: missing columns {missing}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise CsvParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
        values = dict(zip(header, rec))
        try:
            kwargs = {f.name: (values[f.name] if f.name == "name" else float(values[f.name]))
                      for f in fields(SweepRow) if f.name in values}
        except ValueError as exc:
            raise CsvParseError(f"{path}:{lineno}: {exc}") from None
        rows.append(SweepRow(**kwargs))
    return rows


def patched_test_set(items: Sequence, entry: SweepEntry, seed: int) -> tuple:
    """Apply ``entry``'s patch to every vehicle; returns (images, patch boxes per image)."""
    rng = np.random.default_rng(seed)
    images, patch_boxes = [], []
    for item in items:
        cfg = replace(entry.apply, seed=int(rng.integers(2**31)))
        img, jitter = apply_patches(item.image, item.boxes, entry.patch, cfg)
        images.append(img.data)
        patch_boxes.append([rec_box(r, 0, item.width, item.height) for r in jitter if not r.get("skipped")])
    return images, patch_boxes


def _class_agnostic(dets: Sequence[Detection]) -> list:
    return [BoundingBox(0, d.box.cx, d.box.cy, d.box.w, d.box.h, d.score) for d in dets]


def evaluate_entry(detector: DetectorWeights, patch_detector: DetectorWeights, items: Sequence,
                   entry: SweepEntry, baseline_mf1: float, classes, seed: int = 0,
                   conf_thresh: float = 0.25, n_boot: int = 0) -> SweepRow:
    images, patch_truths = patched_test_set(items, entry, seed)
    truths = [it.boxes for it in items]
    camo = f1_report(predict(detector, images, conf_thresh), truths, classes, n_boot=n_boot).mf1
    # patch detection is scored class-agnostically: unseen patches have no identity of their own
    pdets = [_class_agnostic(d) for d in predict(patch_detector, images, conf_thresh)]
    f1p = f1_report(pdets, patch_truths, 1, n_boot=n_boot).mf1
    try:
        reduction = mf1_reduction(baseline_mf1, camo)
    except UndefinedMetricError:
        log.warning("baseline mF1 is zero; mF1 reduction for %s is undefined", entry.name)
        reduction = float("nan")
    return SweepRow(entry.name, entry.apply.size_fraction, entry.apply.alpha, camo, f1p,
                    detection_score(camo, f1p), reduction, baseline_mf1)


def run_sweep(detector: DetectorWeights, patch_detector: DetectorWeights, library: Sequence[SweepEntry],
              items: Sequence, classes, seed: int = 0, conf_thresh: float = 0.25,
              workers: int = 1, baseline_mf1: Optional[float] = None) -> SweepReport:
    """Score every library patch on the test items with both detectors."""
    if not library:
        raise ValueError("run_sweep needs a non-empty patch library")
    if baseline_mf1 is None:
        baseline_mf1 = f1_report(predict(detector, [it.image for it in items], conf_thresh),
                                 [it.boxes for it in items], classes, n_boot=0).mf1

    def job(entry):
        return evaluate_entry(detector, patch_detector, items, entry, baseline_mf1, classes, seed, conf_thresh)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(job, library))
    else:
        rows = [job(e) for e in library]
    return SweepReport(rows, baseline_mf1, sweep_correlations(rows))
