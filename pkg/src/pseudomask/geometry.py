"""Box geometry: float pixel boxes, IoU, delta encoding, rasterization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel units, COCO (x, y, w, h) convention.

    (x, y) is the top-left corner; w and h must be strictly positive.
    """

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs w>0 and h>0, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    def clipped(self, width: float, height: float) -> "BBox":
        """Intersect with [0,width]x[0,height]; raises if the overlap is empty."""
        x1 = max(self.x, 0.0)
        y1 = max(self.y, 0.0)
        x2 = min(self.x2, float(width))
        y2 = min(self.y2, float(height))
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"box {self} does not intersect {width}x{height} image")
        return BBox(x1, y1, x2 - x1, y2 - y1)


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def round_half_up(v: float) -> int:
    """Round with .5 going up (1.5 -> 2, 2.5 -> 3); numpy rounds half-even."""
    return int(np.floor(v + 0.5))


def rasterize(box: BBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer pixel extent (x0, y0, x1, y1) of a box, clipped to the image.

    Edges are rounded half-up; the extent covers columns x0..x1-1 and rows
    y0..y1-1 and may be empty (x1 <= x0) for boxes outside the image.
    """
    x0 = max(round_half_up(box.x), 0)
    y0 = max(round_half_up(box.y), 0)
    x1 = min(round_half_up(box.x2), width)
    y1 = min(round_half_up(box.y2), height)
    return x0, y0, x1, y1


def encode_deltas(src: BBox, dst: BBox) -> np.ndarray:
    """Standard center/size deltas (dx, dy, dw, dh) taking src onto dst."""
    sx, sy = src.x + src.w / 2.0, src.y + src.h / 2.0
    dx_, dy_ = dst.x + dst.w / 2.0, dst.y + dst.h / 2.0
    return np.array(
        [
            (dx_ - sx) / src.w,
            (dy_ - sy) / src.h,
            np.log(dst.w / src.w),
            np.log(dst.h / src.h),
        ],
        dtype=np.float64,
    )


def apply_deltas(src: BBox, deltas: np.ndarray) -> BBox:
    """Inverse of :func:`encode_deltas`."""
    cx = src.x + src.w / 2.0 + float(deltas[0]) * src.w
    cy = src.y + src.h / 2.0 + float(deltas[1]) * src.h
    w = src.w * float(np.exp(deltas[2]))
    h = src.h * float(np.exp(deltas[3]))
    return BBox(cx - w / 2.0, cy - h / 2.0, w, h)
