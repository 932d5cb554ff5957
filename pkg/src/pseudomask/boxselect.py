"""Pseudo bounding-box selection.

Each candidate is scored by the guidance mass inside it normalized by the
square root of its area; the argmax becomes the pseudo box. Guidance mass
is the count of set bits in the binary union grid (or the soft-value sum
when the ablation flag is on); area is the continuous w*h, which avoids
double-rounding between numerator and denominator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BBox, rasterize
from .proposal import ProposalSet


class NoActivationError(ValueError):
    """The guidance grid has no set bits; the object cannot be localized."""


@dataclass(frozen=True)
class PseudoBox:
    box: BBox
    category_id: int
    score: float
    provenance: dict


def select_pseudo_box(
    candidates: ProposalSet,
    guidance_pixels: np.ndarray,
    category_id: int = -1,
    use_soft: bool = False,
    provenance: dict | None = None,
) -> PseudoBox:
    """Argmax of guidance coverage / sqrt(area) over the candidates.

    guidance_pixels must already be at image resolution: boolean for the
    standard binary path, float for the soft ablation. Ties break toward
    smaller area, then lower candidate index.
    """
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    grid = np.asarray(guidance_pixels)
    height, width = grid.shape
    if use_soft:
        values = grid.astype(np.float64)
    else:
        values = grid.astype(np.bool_).astype(np.float64)
    if values.sum() <= 0.0:
        raise NoActivationError(f"no activation evidence for category {category_id}")
    cum = np.zeros((height + 1, width + 1))
    cum[1:, 1:] = values.cumsum(axis=0).cumsum(axis=1)

    best_idx = -1
    best_score = -np.inf
    best_area = np.inf
    for i, b in enumerate(candidates.boxes):
        x0, y0, x1, y1 = rasterize(b, width, height)
        inside = cum[y1, x1] - cum[y0, x1] - cum[y1, x0] + cum[y0, x0] if (x1 > x0 and y1 > y0) else 0.0
        score = float(inside) / np.sqrt(b.area)
        if score > best_score or (score == best_score and b.area < best_area):
            best_idx, best_score, best_area = i, score, b.area
    return PseudoBox(
        box=candidates.boxes[best_idx],
        category_id=category_id,
        score=best_score,
        provenance=dict(provenance or {}),
    )
