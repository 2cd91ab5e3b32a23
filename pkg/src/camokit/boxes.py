"""Normalized bounding boxes shared by every stage of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional


@dataclass(frozen=True)
class BoundingBox:
    """Class-labeled box with centre/size given as fractions of the image extent."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    confidence: Optional[float] = None

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def is_valid(self) -> bool:
        coords_ok = all(0.0 <= v <= 1.0 for v in (self.cx, self.cy, self.w, self.h))
        return coords_ok and self.w > 0 and self.h > 0

    def with_class(self, class_id: int) -> "BoundingBox":
        return replace(self, class_id=class_id)

    def to_pixels(self, width: int, height: int) -> tuple:
        """(x0, y0, x1, y1) in pixel units."""
        return (self.x0 * width, self.y0 * height, self.x1 * width, self.y1 * height)

    @classmethod
    def from_pixels(cls, class_id: int, x0: float, y0: float, x1: float, y1: float,
                    width: int, height: int, confidence: Optional[float] = None) -> "BoundingBox":
        return cls(class_id, (x0 + x1) / 2 / width, (y0 + y1) / 2 / height,
                   (x1 - x0) / width, (y1 - y0) / height, confidence)

    def to_line(self) -> str:
        return f"{self.class_id} {self.cx:.8f} {self.cy:.8f} {self.w:.8f} {self.h:.8f}"

    @classmethod
    def from_line(cls, line: str) -> "BoundingBox":
        parts = line.split()
        if len(parts) not in (5, 6):
            raise ValueError(f"expected 'class_id cx cy w h', got {line!r}")
        conf = float(parts[5]) if len(parts) == 6 else None
        return cls(int(parts[0]), *(float(p) for p in parts[1:5]), confidence=conf)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes (class labels ignored)."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union) if union > 0 else 0.0
