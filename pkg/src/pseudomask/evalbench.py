"""Quality measurement: recall@K, AP50 (box and mask), split protocols.

AP follows the COCO conventions used throughout: greedy matching by
descending detection score with each ground-truth instance matched at most
once, then 101-point interpolated precision-recall area at IoU 0.5,
reported as a percentage.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .annotations import Annotation, ImageInfo
from .config import BASE, NOVEL, CategoryTable
from .geometry import BBox, iou
from .raster import mask_iou, rle_decode

CONSTRAINED = "constrained"
GENERALIZED = "generalized"


@dataclass(frozen=True)
class ClassMetrics:
    category_id: int
    name: str
    split: str
    n_gt: int
    recall_at_k: float
    ap50_box: float
    ap50_mask: float


@dataclass(frozen=True)
class EvalReport:
    setting: str
    k: int
    per_class: tuple[ClassMetrics, ...]
    map50_box: dict
    map50_mask: dict
    matched_pairs: tuple[dict, ...]
    interpolation: str = "101-point"


def recall_at_k(
    proposals_per_image: dict[int, list[BBox]],
    gt_per_image: dict[int, list[tuple[int, BBox]]],
    k: int,
    iou_thresh: float = 0.5,
) -> dict[int, float]:
    """Fraction of GT boxes per class covered by any top-K proposal."""
    recalled: dict[int, int] = {}
    total: dict[int, int] = {}
    for image_id, gts in gt_per_image.items():
        props = proposals_per_image.get(image_id, [])[:k]
        for cid, gt_box in gts:
            total[cid] = total.get(cid, 0) + 1
            if any(iou(p, gt_box) >= iou_thresh for p in props):
                recalled[cid] = recalled.get(cid, 0) + 1
    return {cid: recalled.get(cid, 0) / n for cid, n in total.items()}


def _det_iou(a: Annotation, b: Annotation, mode: str) -> float:
    if mode == "box":
        return iou(a.bbox, b.bbox)
    if mode == "mask":
        return mask_iou(rle_decode(a.segmentation), rle_decode(b.segmentation))
    raise ValueError(f"unknown AP mode {mode!r}")


def _interpolated_ap(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP (percent) from per-rank TP/FP flags."""
    if n_gt == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    ap = 0.0
    for t in np.linspace(0.0, 1.0, 101):
        mask = recall >= t - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return 100.0 * ap / 101.0


def ap50(
    detections: list[Annotation],
    ground_truth: list[Annotation],
    mode: str = "box",
    iou_thresh: float = 0.5,
) -> tuple[dict[int, float], list[dict]]:
    """Per-class AP50 plus the matched-pair audit dump.

    Detections are sorted per class by descending score (stable, so equal
    scores keep input order); each detection greedily takes the unmatched
    same-image GT with the highest overlap, ties broken by GT index.
    """
    gt_by_class: dict[int, list[Annotation]] = {}
    for g in ground_truth:
        gt_by_class.setdefault(g.category_id, []).append(g)

    per_class: dict[int, float] = {}
    pairs: list[dict] = []
    for cid, gts in sorted(gt_by_class.items()):
        dets = [d for d in detections if d.category_id == cid]
        dets.sort(key=lambda d: -(d.score if d.score is not None else 1.0))
        matched: set[int] = set()
        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        for rank, det in enumerate(dets):
            best_iou = 0.0
            best_j = -1
            for j, g in enumerate(gts):
                if j in matched or g.image_id != det.image_id:
                    continue
                v = _det_iou(det, g, mode)
                if v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0 and best_iou >= iou_thresh:
                matched.add(best_j)
                tp[rank] = 1.0
                pairs.append(
                    {
                        "category_id": cid,
                        "image_id": det.image_id,
                        "gt_id": gts[best_j].id,
                        "det_id": det.id,
                        "iou": best_iou,
                        "score": det.score if det.score is not None else 1.0,
                        "mode": mode,
                    }
                )
            else:
                fp[rank] = 1.0
        per_class[cid] = _interpolated_ap(tp, fp, len(gts))
    return per_class, pairs


def _mean(vals: list[float]) -> float | None:
    return float(np.mean(vals)) if vals else None


def split_eval(
    images: list[ImageInfo],
    categories: CategoryTable,
    ground_truth: list[Annotation],
    predictions: list[Annotation],
    setting: str,
    k: int = 50,
) -> EvalReport:
    """Evaluate under the constrained or generalized protocol.

    Constrained keeps only images containing novel instances and restricts
    the vocabulary to novel categories; generalized evaluates everything
    and aggregates novel/base/all.
    """
    if setting not in (CONSTRAINED, GENERALIZED):
        raise ValueError(f"setting must be {CONSTRAINED}|{GENERALIZED}, got {setting!r}")
    novel_ids = set(categories.novel_ids())
    if setting == CONSTRAINED:
        keep_images = {g.image_id for g in ground_truth if g.category_id in novel_ids}
        vocab = novel_ids
        gt = [g for g in ground_truth if g.image_id in keep_images and g.category_id in vocab]
        preds = [p for p in predictions if p.image_id in keep_images and p.category_id in vocab]
    else:
        gt = list(ground_truth)
        preds = list(predictions)

    ap_box, pairs_box = ap50(preds, gt, mode="box")
    ap_mask, pairs_mask = ap50(preds, gt, mode="mask")

    props: dict[int, list[BBox]] = {}
    for p in sorted(preds, key=lambda a: -(a.score if a.score is not None else 1.0)):
        props.setdefault(p.image_id, []).append(p.bbox)
    gt_boxes: dict[int, list[tuple[int, BBox]]] = {}
    for g in gt:
        gt_boxes.setdefault(g.image_id, []).append((g.category_id, g.bbox))
    recalls = recall_at_k(props, gt_boxes, k)

    n_gt: dict[int, int] = {}
    for g in gt:
        n_gt[g.category_id] = n_gt.get(g.category_id, 0) + 1

    per_class = []
    for cat in categories:
        if cat.id not in n_gt:
            continue  # classes absent from GT are omitted from the report
        per_class.append(
            ClassMetrics(
                category_id=cat.id,
                name=cat.name,
                split=cat.split,
                n_gt=n_gt[cat.id],
                recall_at_k=100.0 * recalls.get(cat.id, 0.0),
                ap50_box=ap_box.get(cat.id, 0.0),
                ap50_mask=ap_mask.get(cat.id, 0.0),
            )
        )

    def group(vals: dict[int, float]) -> dict:
        by_split = {
            NOVEL: [vals[c.category_id] for c in per_class if c.split == NOVEL],
            BASE: [vals[c.category_id] for c in per_class if c.split == BASE],
        }
        return {
            "novel": _mean(by_split[NOVEL]),
            "base": _mean(by_split[BASE]) if setting == GENERALIZED else None,
            "all": _mean(by_split[NOVEL] + by_split[BASE]) if setting == GENERALIZED else None,
        }

    box_vals = {c.category_id: c.ap50_box for c in per_class}
    mask_vals = {c.category_id: c.ap50_mask for c in per_class}
    return EvalReport(
        setting=setting,
        k=k,
        per_class=tuple(per_class),
        map50_box=group(box_vals),
        map50_mask=group(mask_vals),
        matched_pairs=tuple(pairs_box + pairs_mask),
    )


def write_report_json(report: EvalReport, path) -> None:
    doc = {
        "setting": report.setting,
        "k": report.k,
        "interpolation": report.interpolation,
        "map50_box": report.map50_box,
        "map50_mask": report.map50_mask,
        "per_class": [
            {
                "category_id": c.category_id,
                "name": c.name,
                "split": c.split,
                "n_gt": c.n_gt,
                "recall_at_k": c.recall_at_k,
                "ap50_box": c.ap50_box,
                "ap50_mask": c.ap50_mask,
            }
            for c in report.per_class
        ],
        "matched_pairs": list(report.matched_pairs),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category_id", "name", "split", "n_gt", f"recall@{report.k}", "ap50_box", "ap50_mask"])
        for c in report.per_class:
            writer.writerow([c.category_id, c.name, c.split, c.n_gt, c.recall_at_k, c.ap50_box, c.ap50_mask])


def write_recall_csv(per_category_recall: dict[str, dict[str, float]], path) -> None:
    """Plot-ready recall-vs-category table; one column per method."""
    methods = sorted({m for row in per_category_recall.values() for m in row})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", *methods])
        for cat in sorted(per_category_recall):
            writer.writerow([cat, *[per_category_recall[cat].get(m, "") for m in methods]])
