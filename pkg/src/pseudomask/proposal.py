"""Class-agnostic box proposals.

Two sources: an unsupervised proposer (color-component regions, sliding
windows, jittered variants) and a weakly-supervised proposal network
trained from image-level labels alone. The network scores every proposal
with a classification softmax over categories and a detection softmax over
proposals; their elementwise product gives instance evidence whose
per-class sum is the image-level classification score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import CategoryTable, TrainSchedule
from .geometry import BBox, encode_deltas, iou, rasterize
from .raster import ImageGrid
from .rng import stream

EPS = 1e-7
FEATURE_DIM = 19
HIDDEN_DIM = 32


@dataclass(frozen=True)
class ProposalSet:
    boxes: tuple[BBox, ...]
    source: str  # "unsupervised" | "wspn"
    scores: np.ndarray | None = None

    def __len__(self):
        return len(self.boxes)


# ---------------------------------------------------------------------------
# unsupervised proposer


def _grid_windows(width: int, height: int) -> list[BBox]:
    out = []
    base = float(min(width, height))
    for scale in (0.25, 0.4, 0.6, 0.85):
        for ar in (0.5, 1.0, 2.0):
            w = base * scale * np.sqrt(ar)
            h = base * scale / np.sqrt(ar)
            if w > width or h > height:
                continue
            step_x = max(w * 0.5, 4.0)
            step_y = max(h * 0.5, 4.0)
            xs = np.arange(0.0, width - w + 1e-9, step_x)
            ys = np.arange(0.0, height - h + 1e-9, step_y)
            for y in ys:
                for x in xs:
                    out.append(
                        BBox(min(float(x), width - w), min(float(y), height - h), float(w), float(h))
                    )
    out.append(BBox(0.0, 0.0, float(width), float(height)))
    return out


def _color_component_boxes(img: ImageGrid, min_area: int = 30) -> list[BBox]:
    # quantize to 5 levels per channel; the dominant color is background
    q = np.floor(img.data * 4.0 + 0.5).astype(np.int32)
    index = q[:, :, 0] * 25 + q[:, :, 1] * 5 + q[:, :, 2]
    vals, counts = np.unique(index, return_counts=True)
    background = vals[np.argmax(counts)]
    boxes = []
    for v in vals:
        if v == background:
            continue
        labeled, n = ndimage.label(index == v)
        for sl in ndimage.find_objects(labeled):
            h = sl[0].stop - sl[0].start
            w = sl[1].stop - sl[1].start
            if w * h < min_area:
                continue
            if w * h > 0.9 * img.width * img.height:
                continue
            boxes.append(BBox(float(sl[1].start), float(sl[0].start), float(w), float(h)))
    return boxes


def _dedup(boxes: list[BBox], thresh: float = 0.95) -> list[BBox]:
    if not boxes:
        return []
    arr = np.array([[b.x, b.y, b.x2, b.y2, b.area] for b in boxes])
    kept: list[int] = []
    for i in range(len(boxes)):
        if kept:
            k = arr[kept]
            ix = np.minimum(k[:, 2], arr[i, 2]) - np.maximum(k[:, 0], arr[i, 0])
            iy = np.minimum(k[:, 3], arr[i, 3]) - np.maximum(k[:, 1], arr[i, 1])
            inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
            if (inter / (k[:, 4] + arr[i, 4] - inter) >= thresh).any():
                continue
        kept.append(i)
    return [boxes[i] for i in kept]


def unsupervised_proposals(img: ImageGrid, seed: int = 0, jitters: int = 6) -> ProposalSet:
    """Color-region boxes + multi-scale grid + seeded jitters, deduplicated.

    Jitters are deliberately wide (half to 1.6x scale, up to 30% shift), so
    every strong region contributes a spread of partial-overlap candidates
    the way real proposal machinery does.
    """
    color_boxes = _color_component_boxes(img)
    rng = stream(seed, "proposals/jitter")
    jittered = []
    for b in color_boxes:
        for _ in range(jitters):
            s = float(rng.uniform(0.55, 1.6))
            dx = float(rng.uniform(-0.3, 0.3)) * b.w
            dy = float(rng.uniform(-0.3, 0.3)) * b.h
            cx, cy = b.x + b.w / 2 + dx, b.y + b.h / 2 + dy
            w, h = b.w * s, b.h * s
            cand = BBox(cx - w / 2, cy - h / 2, w, h)
            try:
                jittered.append(cand.clipped(img.width, img.height))
            except ValueError:
                continue
    boxes = _dedup(color_boxes + jittered + _grid_windows(img.width, img.height))
    return ProposalSet(boxes=tuple(boxes), source="unsupervised")


# ---------------------------------------------------------------------------
# fixed per-box features (integral-image pooling; no learned parameters)


class ImageFeatures:
    """Cached integral images for O(1) box pooling."""

    def __init__(self, img: ImageGrid):
        d = img.data
        gray = d.mean(axis=2)
        grad = np.abs(np.gradient(gray, axis=0)) + np.abs(np.gradient(gray, axis=1))
        self.height, self.width = gray.shape
        self._sum = _integral(d)
        self._sumsq = _integral(d * d)
        self._grad = _integral(grad[:, :, None])

    def _box_sums(self, table: np.ndarray, x0, y0, x1, y1):
        return table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0]

    def region_mean(self, x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
        area = max((x1 - x0) * (y1 - y0), 1)
        return self._box_sums(self._sum, x0, y0, x1, y1) / area

    def region_var(self, x0: int, y0: int, x1: int, y1: int) -> float:
        area = max((x1 - x0) * (y1 - y0), 1)
        m = self._box_sums(self._sum, x0, y0, x1, y1) / area
        m2 = self._box_sums(self._sumsq, x0, y0, x1, y1) / area
        return float(np.maximum(m2 - m * m, 0.0).mean())

    def region_grad(self, x0: int, y0: int, x1: int, y1: int) -> float:
        area = max((x1 - x0) * (y1 - y0), 1)
        return float(self._box_sums(self._grad, x0, y0, x1, y1)[0] / area)


def _integral(a: np.ndarray) -> np.ndarray:
    h, w, c = a.shape
    out = np.zeros((h + 1, w + 1, c))
    out[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    return out


def box_features(feats: ImageFeatures, box: BBox) -> np.ndarray:
    """19 fixed descriptors: color stats, contrast, edges, geometry, and a
    3x3 fill-pattern signature that carries shape identity."""
    W, H = feats.width, feats.height
    x0, y0, x1, y1 = rasterize(box, W, H)
    x1, y1 = max(x1, x0 + 1), max(y1, y0 + 1)
    interior_mean = feats.region_mean(x0, y0, x1, y1)
    interior_var = feats.region_var(x0, y0, x1, y1)

    mx, my = max(int(0.3 * (x1 - x0)), 1), max(int(0.3 * (y1 - y0)), 1)
    ox0, oy0 = max(x0 - mx, 0), max(y0 - my, 0)
    ox1, oy1 = min(x1 + mx, W), min(y1 + my, H)
    outer_sum = feats.region_mean(ox0, oy0, ox1, oy1) * ((ox1 - ox0) * (oy1 - oy0))
    inner_sum = interior_mean * ((x1 - x0) * (y1 - y0))
    ring_area = (ox1 - ox0) * (oy1 - oy0) - (x1 - x0) * (y1 - y0)
    ring_mean = (outer_sum - inner_sum) / ring_area if ring_area > 0 else interior_mean
    contrast = float(np.linalg.norm(interior_mean - ring_mean))

    border_grad = feats.region_grad(ox0, oy0, ox1, oy1)

    # fill signature: per 3x3 sub-block, color distance to the interior mean
    xs = [x0 + (x1 - x0) * i // 3 for i in range(4)]
    ys = [y0 + (y1 - y0) * i // 3 for i in range(4)]
    signature = []
    for bi in range(3):
        for bj in range(3):
            sx0, sx1 = xs[bj], max(xs[bj + 1], xs[bj] + 1)
            sy0, sy1 = ys[bi], max(ys[bi + 1], ys[bi] + 1)
            block = feats.region_mean(sx0, sy0, sx1, sy1)
            signature.append(float(np.linalg.norm(block - ring_mean)))

    return np.array(
        [
            *interior_mean,
            interior_var,
            contrast,
            border_grad,
            *signature,
            np.log(box.w / W),
            np.log(box.h / H),
            np.log(box.w / box.h),
            np.sqrt(box.area / (W * H)),
        ]
    )


def proposal_features(img: ImageGrid, proposals: ProposalSet) -> np.ndarray:
    feats = ImageFeatures(img)
    return np.stack([box_features(feats, b) for b in proposals.boxes])


# ---------------------------------------------------------------------------
# weakly-supervised proposal network


@dataclass
class WspnModel:
    """Two-layer MLP over pooled box features with cls/det/reg heads."""

    w1: np.ndarray
    b1: np.ndarray
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_det: np.ndarray
    b_det: np.ndarray
    w_reg: np.ndarray
    b_reg: np.ndarray
    class_ids: tuple[int, ...] = ()
    feat_mean: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    feat_scale: np.ndarray = field(default_factory=lambda: np.ones(FEATURE_DIM))

    @property
    def n_classes(self) -> int:
        return self.w_cls.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1, "b1": self.b1,
            "w_cls": self.w_cls, "b_cls": self.b_cls,
            "w_det": self.w_det, "b_det": self.b_det,
            "w_reg": self.w_reg, "b_reg": self.b_reg,
        }


def init_wspn(n_classes: int, rng: np.random.Generator, class_ids: tuple[int, ...] = ()) -> WspnModel:
    """He-scaled init; the regression head starts at zero (identity deltas)."""
    return WspnModel(
        w1=rng.normal(0.0, np.sqrt(2.0 / FEATURE_DIM), size=(FEATURE_DIM, HIDDEN_DIM)),
        b1=np.zeros(HIDDEN_DIM),
        w_cls=rng.normal(0.0, np.sqrt(1.0 / HIDDEN_DIM), size=(HIDDEN_DIM, n_classes)),
        b_cls=np.zeros(n_classes),
        w_det=rng.normal(0.0, np.sqrt(1.0 / HIDDEN_DIM), size=(HIDDEN_DIM, n_classes)),
        b_det=np.zeros(n_classes),
        w_reg=np.zeros((HIDDEN_DIM, 4)),
        b_reg=np.zeros(4),
        class_ids=class_ids,
    )


@dataclass(frozen=True)
class WspnScores:
    """Raw and normalized score matrices in the C x N orientation."""

    w_cls: np.ndarray
    w_det: np.ndarray
    sigma_cls: np.ndarray
    sigma_det: np.ndarray
    w_c: np.ndarray
    p: np.ndarray
    pred_deltas: np.ndarray  # (N, 4) regression-head output
    hidden: np.ndarray  # (N, H) kept for backprop


def _softmax_cols(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _normalize_feats(model: WspnModel, feats: np.ndarray) -> np.ndarray:
    return (feats - model.feat_mean) / model.feat_scale


def wspn_score_features(model: WspnModel, feats: np.ndarray) -> WspnScores:
    """Dual-softmax instance scores from pooled box features (N, D)."""
    x = _normalize_feats(model, feats)
    hidden = np.maximum(x @ model.w1 + model.b1, 0.0)
    cls_raw = (hidden @ model.w_cls + model.b_cls).T  # (C, N)
    det_raw = (hidden @ model.w_det + model.b_det).T  # (C, N)
    sigma_cls = _softmax_cols(cls_raw)
    sigma_det = _softmax_rows(det_raw)
    w_c = sigma_cls * sigma_det
    p = w_c.sum(axis=1)
    deltas = hidden @ model.w_reg + model.b_reg
    return WspnScores(
        w_cls=cls_raw, w_det=det_raw, sigma_cls=sigma_cls, sigma_det=sigma_det,
        w_c=w_c, p=p, pred_deltas=deltas, hidden=hidden,
    )


def wspn_score(model: WspnModel, img: ImageGrid, proposals: ProposalSet) -> WspnScores:
    if len(proposals) < 1:
        raise ValueError("need at least one proposal")
    return wspn_score_features(model, proposal_features(img, proposals))


@dataclass(frozen=True)
class RegressionTargets:
    """Per-proposal assignment of pseudo targets (seed boxes) in delta space."""

    assigned: np.ndarray  # (N,) bool
    target_deltas: np.ndarray  # (N, 4); rows meaningful only where assigned


def make_pseudo_regression_targets(
    scores: WspnScores, proposals: ProposalSet, labels: np.ndarray
) -> RegressionTargets:
    """Seed = best-evidence proposal per present class; neighbors adopt it.

    Every proposal with IoU >= 0.5 to a seed regresses toward that seed's
    box; with multiple present classes the latest class processed wins ties
    in assignment order (classes are processed in index order).
    """
    n = len(proposals)
    assigned = np.zeros(n, dtype=bool)
    targets = np.zeros((n, 4))
    for c in np.flatnonzero(np.asarray(labels) > 0):
        seed_idx = int(np.argmax(scores.w_c[c]))
        seed_box = proposals.boxes[seed_idx]
        for i, b in enumerate(proposals.boxes):
            if iou(b, seed_box) >= 0.5:
                assigned[i] = True
                targets[i] = encode_deltas(b, seed_box)
    return RegressionTargets(assigned=assigned, target_deltas=targets)


def _smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def _smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def wspn_loss(
    scores: WspnScores,
    labels: np.ndarray,
    proposals: ProposalSet,
    reg_targets: RegressionTargets,
) -> float:
    """Binary cross-entropy on image scores + mean smooth-L1 on assigned deltas."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(scores.p, EPS, 1.0 - EPS)
    bce = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())
    reg = 0.0
    if reg_targets.assigned.any():
        diff = scores.pred_deltas[reg_targets.assigned] - reg_targets.target_deltas[reg_targets.assigned]
        reg = float(_smooth_l1(diff).sum(axis=1).mean())
    return bce + reg


def _loss_and_grads(
    model: WspnModel,
    feats: np.ndarray,
    labels: np.ndarray,
    reg_targets: RegressionTargets,
) -> tuple[float, dict[str, np.ndarray]]:
    """Full forward + hand-derived backward for one image."""
    x = _normalize_feats(model, feats)
    hidden_pre = x @ model.w1 + model.b1
    hidden = np.maximum(hidden_pre, 0.0)
    cls_raw = (hidden @ model.w_cls + model.b_cls).T
    det_raw = (hidden @ model.w_det + model.b_det).T
    sigma_cls = _softmax_cols(cls_raw)
    sigma_det = _softmax_rows(det_raw)
    w_c = sigma_cls * sigma_det
    p = w_c.sum(axis=1)
    deltas = hidden @ model.w_reg + model.b_reg

    y = np.asarray(labels, dtype=np.float64)
    p_cl = np.clip(p, EPS, 1.0 - EPS)
    loss = float(-(y * np.log(p_cl) + (1.0 - y) * np.log(1.0 - p_cl)).sum())

    # d(BCE)/dp, zero where the clamp is active
    dp = np.where((p > EPS) & (p < 1.0 - EPS), -(y / p_cl) + (1.0 - y) / (1.0 - p_cl), 0.0)
    dw_c = dp[:, None] * np.ones_like(w_c)
    dsigma_cls = dw_c * sigma_det
    dsigma_det = dw_c * sigma_cls
    # softmax backward: columns for cls, rows for det
    dcls = sigma_cls * (dsigma_cls - (dsigma_cls * sigma_cls).sum(axis=0, keepdims=True))
    ddet = sigma_det * (dsigma_det - (dsigma_det * sigma_det).sum(axis=1, keepdims=True))

    ddeltas = np.zeros_like(deltas)
    if reg_targets.assigned.any():
        idx = reg_targets.assigned
        diff = deltas[idx] - reg_targets.target_deltas[idx]
        loss += float(_smooth_l1(diff).sum(axis=1).mean())
        ddeltas[idx] = _smooth_l1_grad(diff) / idx.sum()

    dhidden = dcls.T @ model.w_cls.T + ddet.T @ model.w_det.T + ddeltas @ model.w_reg.T
    dhidden = dhidden * (hidden_pre > 0.0)
    grads = {
        "w_cls": hidden.T @ dcls.T, "b_cls": dcls.sum(axis=1),
        "w_det": hidden.T @ ddet.T, "b_det": ddet.sum(axis=1),
        "w_reg": hidden.T @ ddeltas, "b_reg": ddeltas.sum(axis=0),
        "w1": x.T @ dhidden, "b1": dhidden.sum(axis=0),
    }
    return loss, grads


def wspn_loss_from_features(
    model: WspnModel, feats: np.ndarray, labels: np.ndarray, reg_targets: RegressionTargets
) -> float:
    """Loss with a frozen target assignment; used by gradient checks."""
    scores = wspn_score_features(model, feats)
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(scores.p, EPS, 1.0 - EPS)
    loss = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())
    if reg_targets.assigned.any():
        diff = scores.pred_deltas[reg_targets.assigned] - reg_targets.target_deltas[reg_targets.assigned]
        loss += float(_smooth_l1(diff).sum(axis=1).mean())
    return loss


def wspn_gradients(
    model: WspnModel, feats: np.ndarray, labels: np.ndarray, reg_targets: RegressionTargets
) -> dict[str, np.ndarray]:
    return _loss_and_grads(model, feats, labels, reg_targets)[1]


@dataclass(frozen=True)
class WspnTrainResult:
    model: WspnModel
    loss_curve: np.ndarray


def _fit_feature_stats(model: WspnModel, all_feats: list[np.ndarray]) -> None:
    stacked = np.concatenate(all_feats, axis=0)
    model.feat_mean = stacked.mean(axis=0)
    model.feat_scale = np.maximum(stacked.std(axis=0), 1e-6)


def train_wspn(
    dataset: list[tuple[ImageGrid, set[int]]],
    categories: CategoryTable,
    schedule: TrainSchedule,
    seed: int = 0,
) -> WspnTrainResult:
    """SGD over per-image losses; image-level base-category labels only."""
    if not dataset:
        raise ValueError("empty dataset")
    base_ids = tuple(categories.base_ids())
    if not base_ids:
        raise ValueError("WSPN training requires at least one base category")
    covered = set()
    for _, labels in dataset:
        covered |= set(labels) & set(base_ids)
    missing = set(base_ids) - covered
    if missing:
        raise ValueError(f"dataset never shows base categories {sorted(missing)}")

    feats = []
    props_per_image = []
    label_rows = []
    for img, labels in dataset:
        props = unsupervised_proposals(img, seed=seed)
        props_per_image.append(props)
        feats.append(proposal_features(img, props))
        label_rows.append(np.array([1.0 if cid in labels else 0.0 for cid in base_ids]))

    rng = stream(seed, "wspn/train")
    model = init_wspn(len(base_ids), rng, class_ids=base_ids)
    _fit_feature_stats(model, feats)

    losses = np.zeros(schedule.iters)
    order = rng.permutation(len(dataset))
    for it in range(schedule.iters):
        idx = int(order[it % len(dataset)])
        if it and it % len(dataset) == 0:
            order = rng.permutation(len(dataset))
        scores = wspn_score_features(model, feats[idx])
        reg_targets = make_pseudo_regression_targets(scores, props_per_image[idx], label_rows[idx])
        loss, grads = _loss_and_grads(model, feats[idx], label_rows[idx], reg_targets)
        losses[it] = loss
        params = model.params()
        for name, g in grads.items():
            w = params[name]
            if schedule.weight_decay and not name.startswith("b"):
                g = g + schedule.weight_decay * w
            w -= schedule.lr * g
    return WspnTrainResult(model=model, loss_curve=losses)


def ranked_indices(conf: np.ndarray, areas: np.ndarray, k: int) -> list[int]:
    """Descending confidence; ties by larger area, then lower index."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    order = sorted(range(len(conf)), key=lambda i: (-conf[i], -areas[i], i))
    return order[: min(k, len(order))]


def top_k_features(
    model: WspnModel, feats: np.ndarray, proposals: ProposalSet, k: int
) -> ProposalSet:
    """Rank by max-over-classes detection confidence; truncate to K."""
    scores = wspn_score_features(model, feats)
    conf = scores.sigma_det.max(axis=0)
    areas = np.array([b.area for b in proposals.boxes])
    keep = ranked_indices(conf, areas, k)
    return ProposalSet(
        boxes=tuple(proposals.boxes[i] for i in keep),
        source="wspn",
        scores=conf[keep],
    )


def top_k_proposals(model: WspnModel, img: ImageGrid, k: int, seed: int = 0) -> ProposalSet:
    props = unsupervised_proposals(img, seed=seed)
    return top_k_features(model, proposal_features(img, props), props, k)


# ---------------------------------------------------------------------------
# checkpoint + proposals interchange

WSPN_MAGIC = b"WSPN"
WSPN_VERSION = 1


def save_wspn(model: WspnModel, path) -> None:
    from .containers import write_array_blob

    meta = [model.n_classes, FEATURE_DIM, HIDDEN_DIM, *model.class_ids]
    arrays = [
        model.w1, model.b1, model.w_cls, model.b_cls, model.w_det, model.b_det,
        model.w_reg, model.b_reg, model.feat_mean, model.feat_scale,
    ]
    write_array_blob(path, WSPN_MAGIC, WSPN_VERSION, meta, arrays)


def load_wspn(path) -> WspnModel:
    from .containers import FormatError, read_array_blob

    meta, arrays = read_array_blob(path, WSPN_MAGIC, WSPN_VERSION)
    if len(meta) < 3 or len(arrays) != 10:
        raise FormatError("malformed WSPN checkpoint payload")
    n_classes = meta[0]
    class_ids = tuple(meta[3 : 3 + n_classes])
    w1, b1, w_cls, b_cls, w_det, b_det, w_reg, b_reg, feat_mean, feat_scale = arrays
    return WspnModel(
        w1=w1, b1=b1, w_cls=w_cls, b_cls=b_cls, w_det=w_det, b_det=b_det,
        w_reg=w_reg, b_reg=b_reg, class_ids=class_ids,
        feat_mean=feat_mean, feat_scale=feat_scale,
    )


def write_proposals_json(path, per_image: dict[int, ProposalSet]) -> None:
    import json

    doc = {}
    for image_id in sorted(per_image):
        props = per_image[image_id]
        scores = props.scores if props.scores is not None else [None] * len(props)
        doc[str(image_id)] = [
            {"bbox": b.as_list(), **({"score": float(s)} if s is not None else {})}
            for b, s in zip(props.boxes, scores)
        ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# supervised box-regressor proxy (the comparison point for weak proposals)


@dataclass
class ProxyModel:
    """RPN-style objectness scorer trained from base-category boxes.

    Proposals unmatched to any base ground-truth box are treated as
    background during training, which is exactly what makes its ranking
    overfit the base shapes.
    """

    w1: np.ndarray
    b1: np.ndarray
    w_obj: np.ndarray
    b_obj: float
    w_reg: np.ndarray
    b_reg: np.ndarray
    feat_mean: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    feat_scale: np.ndarray = field(default_factory=lambda: np.ones(FEATURE_DIM))

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w_obj": self.w_obj, "w_reg": self.w_reg, "b_reg": self.b_reg}


def proxy_objectness(model: ProxyModel, feats: np.ndarray) -> np.ndarray:
    x = (feats - model.feat_mean) / model.feat_scale
    hidden = np.maximum(x @ model.w1 + model.b1, 0.0)
    logits = hidden @ model.w_obj + model.b_obj
    return 1.0 / (1.0 + np.exp(-logits))


def train_supervised_proxy(
    dataset: list[tuple[ImageGrid, list[tuple[int, BBox]]]],
    categories: CategoryTable,
    schedule: TrainSchedule,
    seed: int = 0,
) -> ProxyModel:
    """Train objectness + box regression against base-category GT boxes."""
    if not dataset:
        raise ValueError("empty dataset")
    base = set(categories.base_ids())
    feats = []
    obj_targets = []
    reg_rows = []
    for img, gt in dataset:
        props = unsupervised_proposals(img, seed=seed)
        f = proposal_features(img, props)
        base_boxes = [b for cid, b in gt if cid in base]
        ious = np.zeros((len(props), max(len(base_boxes), 1)))
        for j, g in enumerate(base_boxes):
            for i, b in enumerate(props.boxes):
                ious[i, j] = iou(b, g)
        best = ious.max(axis=1) if base_boxes else np.zeros(len(props))
        best_j = ious.argmax(axis=1)
        # 1 = object, 0 = background, -1 = ignored band between the thresholds
        t = np.where(best >= 0.5, 1.0, np.where(best < 0.3, 0.0, -1.0))
        deltas = np.zeros((len(props), 4))
        for i in np.flatnonzero(t == 1.0):
            deltas[i] = encode_deltas(props.boxes[i], base_boxes[int(best_j[i])])
        feats.append(f)
        obj_targets.append(t)
        reg_rows.append(deltas)

    rng = stream(seed, "proxy/train")
    model = ProxyModel(
        w1=rng.normal(0.0, np.sqrt(2.0 / FEATURE_DIM), size=(FEATURE_DIM, HIDDEN_DIM)),
        b1=np.zeros(HIDDEN_DIM),
        w_obj=rng.normal(0.0, np.sqrt(1.0 / HIDDEN_DIM), size=HIDDEN_DIM),
        b_obj=0.0,
        w_reg=np.zeros((HIDDEN_DIM, 4)),
        b_reg=np.zeros(4),
    )
    stacked = np.concatenate(feats, axis=0)
    model.feat_mean = stacked.mean(axis=0)
    model.feat_scale = np.maximum(stacked.std(axis=0), 1e-6)

    order = rng.permutation(len(dataset))
    for it in range(schedule.iters):
        idx = int(order[it % len(dataset)])
        if it and it % len(dataset) == 0:
            order = rng.permutation(len(dataset))
        x = (feats[idx] - model.feat_mean) / model.feat_scale
        hidden_pre = x @ model.w1 + model.b1
        hidden = np.maximum(hidden_pre, 0.0)
        logits = hidden @ model.w_obj + model.b_obj
        prob = 1.0 / (1.0 + np.exp(-logits))
        t = obj_targets[idx]
        keep = t >= 0.0
        n_keep = max(int(keep.sum()), 1)
        dlogits = np.where(keep, prob - np.maximum(t, 0.0), 0.0) / n_keep

        deltas = hidden @ model.w_reg + model.b_reg
        pos = t == 1.0
        ddeltas = np.zeros_like(deltas)
        if pos.any():
            diff = deltas[pos] - reg_rows[idx][pos]
            ddeltas[pos] = _smooth_l1_grad(diff) / pos.sum()

        dhidden = dlogits[:, None] * model.w_obj[None, :] + ddeltas @ model.w_reg.T
        dhidden *= hidden_pre > 0.0
        grads = {
            "w_obj": hidden.T @ dlogits,
            "w_reg": hidden.T @ ddeltas,
            "b_reg": ddeltas.sum(axis=0),
            "w1": x.T @ dhidden,
            "b1": dhidden.sum(axis=0),
        }
        model.b_obj -= schedule.lr * float(dlogits.sum())
        params = model.params()
        for name, g in grads.items():
            w = params[name]
            if schedule.weight_decay and not name.startswith("b"):
                g = g + schedule.weight_decay * w
            w -= schedule.lr * g
    return model


def top_k_proxy(model: ProxyModel, img: ImageGrid, k: int, seed: int = 0) -> ProposalSet:
    """Proxy ranking with the same tie-break discipline as the weak network."""
    props = unsupervised_proposals(img, seed=seed)
    feats = proposal_features(img, props)
    conf = proxy_objectness(model, feats)
    areas = np.array([b.area for b in props.boxes])
    keep = ranked_indices(conf, areas, k)
    return ProposalSet(boxes=tuple(props.boxes[i] for i in keep), source="proxy", scores=conf[keep])
