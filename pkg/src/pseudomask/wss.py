"""Point-supervised segmentation inside a pseudo box.

The guidance activation inside the box nominates the strongest pixels as
foreground points and the weakest as background points; a three-layer
convolutional classifier is then trained with cross-entropy at those
points only and its thresholded output becomes the pseudo mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainSchedule
from .geometry import BBox, rasterize
from .raster import BinaryMask, ImageGrid
from .boxselect import PseudoBox


class PatchTooSmallError(ValueError):
    """Patch has fewer pixels than the requested 2Z points."""


class UninformativeActivationError(ValueError):
    """Constant activation cannot rank foreground against background."""


@dataclass(frozen=True)
class PointLabels:
    """(x, y, label) triples in patch coordinates; label 1 = foreground."""

    points: tuple[tuple[int, int, int], ...]
    z: int

    def foreground(self) -> list[tuple[int, int]]:
        return [(x, y) for x, y, lab in self.points if lab == 1]

    def background(self) -> list[tuple[int, int]]:
        return [(x, y) for x, y, lab in self.points if lab == 0]


@dataclass(frozen=True)
class SegPatch:
    """Per-pixel probabilities and the thresholded mask for one patch."""

    probabilities: np.ndarray
    mask: BinaryMask

    @property
    def height(self) -> int:
        return self.probabilities.shape[0]

    @property
    def width(self) -> int:
        return self.probabilities.shape[1]


def sample_points(activation_patch: np.ndarray, z: int, rng: np.random.Generator) -> PointLabels:
    """Top-Z pixels become foreground, bottom-Z background.

    A random draw per pixel breaks ties, giving one total order; taking the
    two ends of that order keeps the sets disjoint whenever 2Z pixels exist.
    """
    act = np.asarray(activation_patch, dtype=np.float64)
    h, w = act.shape
    if h * w < 2 * z:
        raise PatchTooSmallError(f"patch {h}x{w} cannot host {2 * z} points")
    if float(act.max() - act.min()) == 0.0:
        raise UninformativeActivationError("activation is constant inside the patch")
    tie = rng.random(act.shape)
    flat_order = np.lexsort((tie.ravel(), act.ravel()))  # ascending by value, then tie
    bottom = flat_order[:z]
    top = flat_order[-z:]
    points = []
    for idx in top:
        y, x = divmod(int(idx), w)
        points.append((x, y, 1))
    for idx in bottom:
        y, x = divmod(int(idx), w)
        points.append((x, y, 0))
    return PointLabels(points=tuple(points), z=z)


# ---------------------------------------------------------------------------
# three-layer convolutional patch segmenter (3x3 kernels, widths 8 -> 8 -> 1)


def _im2col(x: np.ndarray) -> np.ndarray:
    """Unfold (C, H, W) into (C*9, H*W) columns for a same-padded 3x3 conv."""
    c, h, w = x.shape
    pad = np.zeros((c, h + 2, w + 2))
    pad[:, 1:-1, 1:-1] = x
    cols = np.empty((c, 9, h, w))
    for di in range(3):
        for dj in range(3):
            cols[:, di * 3 + dj] = pad[:, di : di + h, dj : dj + w]
    return cols.reshape(c * 9, h * w)


def _conv3x3(cols: np.ndarray, w: np.ndarray, b: np.ndarray, h: int, width: int) -> np.ndarray:
    """3x3 conv as one matmul over unfolded columns; w is (C_out, C_in, 3, 3)."""
    c_out = w.shape[0]
    out = w.reshape(c_out, -1) @ cols + b[:, None]
    return out.reshape(c_out, h, width)


def _conv3x3_backward(
    cols: np.ndarray, w: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) given the forward's unfolded columns."""
    c_out, h, width = dy.shape
    dyf = dy.reshape(c_out, -1)
    dw = (dyf @ cols.T).reshape(w.shape)
    db = dyf.sum(axis=1)
    dcols = (w.reshape(c_out, -1).T @ dyf).reshape(w.shape[1], 3, 3, h, width)
    dpad = np.zeros((w.shape[1], h + 2, width + 2))
    for di in range(3):
        for dj in range(3):
            dpad[:, di : di + h, dj : dj + width] += dcols[:, di, dj]
    return dpad[:, 1:-1, 1:-1], dw, db


@dataclass
class SegmenterParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray


def init_segmenter(rng: np.random.Generator, widths: tuple[int, int] = (8, 8)) -> SegmenterParams:
    c1, c2 = widths
    return SegmenterParams(
        w1=rng.normal(0.0, np.sqrt(2.0 / (3 * 9)), size=(c1, 3, 3, 3)),
        b1=np.zeros(c1),
        w2=rng.normal(0.0, np.sqrt(2.0 / (c1 * 9)), size=(c2, c1, 3, 3)),
        b2=np.zeros(c2),
        w3=rng.normal(0.0, np.sqrt(2.0 / (c2 * 9)), size=(1, c2, 3, 3)),
        b3=np.zeros(1),
    )


def segmenter_forward(
    params: SegmenterParams, x: np.ndarray, x_cols: np.ndarray | None = None
) -> tuple[np.ndarray, tuple]:
    h, w = x.shape[1], x.shape[2]
    if x_cols is None:
        x_cols = _im2col(x)
    a1 = _conv3x3(x_cols, params.w1, params.b1, h, w)
    r1 = np.maximum(a1, 0.0)
    r1_cols = _im2col(r1)
    a2 = _conv3x3(r1_cols, params.w2, params.b2, h, w)
    r2 = np.maximum(a2, 0.0)
    r2_cols = _im2col(r2)
    logits = _conv3x3(r2_cols, params.w3, params.b3, h, w)[0]
    probs = 1.0 / (1.0 + np.exp(-logits))
    return probs, (x_cols, a1, r1_cols, a2, r2_cols)


def point_loss(probs: np.ndarray, labels: PointLabels) -> float:
    """Mean cross-entropy over the labeled points."""
    eps = 1e-12
    total = 0.0
    for x, y, lab in labels.points:
        p = min(max(float(probs[y, x]), eps), 1.0 - eps)
        total += -(lab * np.log(p) + (1 - lab) * np.log(1.0 - p))
    return total / len(labels.points)


def _point_loss_grads(
    params: SegmenterParams, probs: np.ndarray, cache: tuple, labels: PointLabels
) -> dict[str, np.ndarray]:
    x_cols, a1, r1_cols, a2, r2_cols = cache
    dlogits = np.zeros((1, *probs.shape))
    n = len(labels.points)
    for px, py, lab in labels.points:
        dlogits[0, py, px] += (probs[py, px] - lab) / n
    dr2, dw3, db3 = _conv3x3_backward(r2_cols, params.w3, dlogits)
    da2 = dr2 * (a2 > 0.0)
    dr1, dw2, db2 = _conv3x3_backward(r1_cols, params.w2, da2)
    da1 = dr1 * (a1 > 0.0)
    _, dw1, db1 = _conv3x3_backward(x_cols, params.w1, da1)
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "w3": dw3, "b3": db3}


def train_patch_segmenter(
    patch: ImageGrid,
    labels: PointLabels,
    schedule: TrainSchedule,
    seed: int = 0,
    rng: np.random.Generator | None = None,
    threshold: float = 0.5,
) -> SegPatch:
    """Gradient descent on point-wise cross-entropy; deterministic per seed."""
    from .rng import stream

    for px, py, _ in labels.points:
        if not (0 <= px < patch.width and 0 <= py < patch.height):
            raise ValueError(f"point ({px}, {py}) outside {patch.width}x{patch.height} patch")
    if rng is None:
        rng = stream(seed, "wss/init")
    params = init_segmenter(rng)
    x = patch.data.transpose(2, 0, 1)  # (3, H, W)
    x_cols = _im2col(x)  # the input never changes; unfold it once
    for _ in range(schedule.iters):
        probs, cache = segmenter_forward(params, x, x_cols)
        grads = _point_loss_grads(params, probs, cache, labels)
        for name, g in grads.items():
            arr = getattr(params, name)
            if schedule.weight_decay and name.startswith("w"):
                g = g + schedule.weight_decay * arr
            arr -= schedule.lr * g
    probs, _ = segmenter_forward(params, x, x_cols)
    return SegPatch(probabilities=probs, mask=BinaryMask(probs >= threshold))


@dataclass(frozen=True)
class PseudoAnnotation:
    """Final product for one (image, category): box, full-image mask, provenance."""

    category_id: int
    box: BBox
    mask: BinaryMask
    score: float
    degenerate: bool
    provenance: dict


def assemble_pseudo_annotation(
    pseudo_box: PseudoBox, seg: SegPatch, image_width: int, image_height: int
) -> PseudoAnnotation:
    """Place the patch mask at the box offset inside an empty full-image mask."""
    x0, y0, x1, y1 = rasterize(pseudo_box.box, image_width, image_height)
    if (y1 - y0, x1 - x0) != seg.mask.bits.shape:
        raise ValueError(
            f"patch mask {seg.mask.bits.shape} does not fit box extent {(y1 - y0, x1 - x0)}"
        )
    full = np.zeros((image_height, image_width), dtype=np.bool_)
    full[y0:y1, x0:x1] = seg.mask.bits
    return PseudoAnnotation(
        category_id=pseudo_box.category_id,
        box=pseudo_box.box,
        mask=BinaryMask(full),
        score=pseudo_box.score,
        degenerate=not bool(seg.mask.bits.any()),
        provenance=dict(pseudo_box.provenance),
    )
