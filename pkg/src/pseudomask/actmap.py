"""Activation-map post-processing.

Raw per-category activation grids are max-normalized and thresholded; the
masking loop repeatedly suppresses already-activated pixels with the image
mean and re-queries the activation source, unioning every thresholded map
into a single guidance grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .raster import ImageGrid


@dataclass(frozen=True)
class ActivationMap:
    """Non-negative score grid at feature resolution for one category."""

    values: np.ndarray
    category_id: int
    iteration: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"activation grid must be 2-d and non-empty, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("activation values must be finite")
        if v.min() < 0.0:
            raise ValueError("activation values must be non-negative")
        object.__setattr__(self, "values", v)
        self.values.setflags(write=False)

    @property
    def h_f(self) -> int:
        return self.values.shape[0]

    @property
    def w_f(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class GuidanceMap:
    """Union of thresholded activation maps across masking iterations.

    ``union_bits`` is the binary union; ``soft_union`` keeps the elementwise
    max of the max-normalized per-iteration maps for consumers that need a
    total order over pixels (point sampling).
    """

    union_bits: np.ndarray
    soft_union: np.ndarray
    category_id: int
    contributing_iterations: tuple[int, ...]
    upsample_mode: str = "nearest"

    def __post_init__(self):
        object.__setattr__(self, "union_bits", np.asarray(self.union_bits, dtype=np.bool_))
        object.__setattr__(self, "soft_union", np.asarray(self.soft_union, dtype=np.float64))
        if self.union_bits.shape != self.soft_union.shape:
            raise ValueError("binary and soft grids must share a shape")
        self.union_bits.setflags(write=False)
        self.soft_union.setflags(write=False)

    @property
    def h_f(self) -> int:
        return self.union_bits.shape[0]

    @property
    def w_f(self) -> int:
        return self.union_bits.shape[1]


def normalize(values: np.ndarray) -> np.ndarray:
    """Scale to [0, 1] by dividing by the max; all-zero grids stay zero."""
    peak = values.max() if values.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(values, dtype=np.float64)
    return values / peak


def im_normalize_threshold(amap: ActivationMap, threshold: float) -> np.ndarray:
    """Max-normalize then keep cells at or above the threshold."""
    scaled = normalize(amap.values)
    if scaled.max() <= 0.0:
        return np.zeros(amap.values.shape, dtype=np.bool_)
    return scaled >= threshold


def upsample(grid: np.ndarray, target_h: int, target_w: int, mode: str = "nearest") -> np.ndarray:
    """Resample a cell grid to pixel resolution.

    nearest replicates each cell over its pixel footprint; bilinear is the
    standard align-corners-off interpolation. Boolean input stays boolean
    under nearest.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target dims must be positive")
    src = np.asarray(grid)
    h, w = src.shape
    if mode == "nearest":
        rows = np.minimum(((np.arange(target_h) + 0.5) * h / target_h).astype(np.int64), h - 1)
        cols = np.minimum(((np.arange(target_w) + 0.5) * w / target_w).astype(np.int64), w - 1)
        return src[np.ix_(rows, cols)]
    if mode == "bilinear":
        srcf = src.astype(np.float64)
        ys = (np.arange(target_h) + 0.5) * h / target_h - 0.5
        xs = (np.arange(target_w) + 0.5) * w / target_w - 0.5
        y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
        x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
        wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
        top = srcf[np.ix_(y0, x0)] * (1 - wx) + srcf[np.ix_(y0, x1)] * wx
        bot = srcf[np.ix_(y1, x0)] * (1 - wx) + srcf[np.ix_(y1, x1)] * wx
        return top * (1 - wy) + bot * wy
    raise ValueError(f"unknown upsample mode {mode!r}")


def iterative_masking(
    vlm_eval: Callable[[ImageGrid], ActivationMap],
    img: ImageGrid,
    G: int,
    threshold: float,
    upsample_mode: str = "nearest",
) -> GuidanceMap:
    """Union activation evidence over G masking iterations.

    Iteration 0 queries the unmodified image. Each later iteration replaces
    every pixel under the union of previously thresholded cells with the
    source image's mean pixel and re-queries. The input image is never
    mutated; G=0 reduces to a single threshold pass.
    """
    if G < 0:
        raise ValueError(f"G must be >= 0, got {G}")
    current = img
    union_bits: np.ndarray | None = None
    soft: np.ndarray | None = None
    category_id = None
    for it in range(G + 1):
        amap = vlm_eval(current)
        category_id = amap.category_id
        bits = im_normalize_threshold(amap, threshold)
        scaled = normalize(amap.values)
        if union_bits is None:
            union_bits = bits
            soft = scaled
        else:
            union_bits = np.logical_or(union_bits, bits)
            soft = np.maximum(soft, scaled)
        if it < G:
            pixel_bits = upsample(union_bits, img.height, img.width, mode="nearest").astype(np.bool_)
            current = img.with_pixels_replaced(pixel_bits, img.mean_pixel)
    return GuidanceMap(
        union_bits=union_bits,
        soft_union=soft,
        category_id=int(category_id),
        contributing_iterations=tuple(range(G + 1)),
        upsample_mode=upsample_mode,
    )
