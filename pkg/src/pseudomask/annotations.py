"""Annotation interchange: the JSON schema shared by every stage.

Layout::

    { "images":        [{id, file_name, width, height}],
      "categories":    [{id, name, split}],
      "annotations":   [{id, image_id, category_id, bbox:[x,y,w,h],
                         segmentation:{counts:[...], size:[h,w]}, score?}] }

Floats go through ``json`` untouched (repr round-trip, full precision).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .config import CategoryTable
from .geometry import BBox
from .raster import BinaryMask, rle_decode, rle_encode


class AnnotationError(ValueError):
    """Schema violation in an annotation file."""


@dataclass(frozen=True)
class ImageInfo:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: BBox
    segmentation: dict
    score: float | None = None

    def mask(self) -> BinaryMask:
        return rle_decode(self.segmentation)


def make_annotation(
    ann_id: int,
    image_id: int,
    category_id: int,
    box: BBox,
    mask: BinaryMask,
    score: float | None = None,
) -> Annotation:
    return Annotation(ann_id, image_id, category_id, box, rle_encode(mask), score)


def write_annotations(
    path,
    images: list[ImageInfo],
    categories: CategoryTable,
    annotations: list[Annotation],
) -> None:
    doc = {
        "images": [
            {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
            for im in images
        ],
        "categories": categories.to_json(),
        "annotations": [],
    }
    for a in annotations:
        row = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "bbox": a.bbox.as_list(),
            "segmentation": a.segmentation,
        }
        if a.score is not None:
            row["score"] = a.score
        doc["annotations"].append(row)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_annotations(path) -> tuple[list[ImageInfo], CategoryTable, list[Annotation]]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("images", "categories", "annotations"):
        if key not in doc:
            raise AnnotationError(f"{path}: missing top-level '{key}'")
    images = [
        ImageInfo(int(r["id"]), str(r["file_name"]), int(r["width"]), int(r["height"]))
        for r in doc["images"]
    ]
    categories = CategoryTable.from_json(doc["categories"])
    anns = []
    for r in doc["annotations"]:
        try:
            box = BBox(*[float(v) for v in r["bbox"]])
        except (TypeError, ValueError) as e:
            raise AnnotationError(f"annotation {r.get('id')}: bad bbox ({e})") from e
        seg = r["segmentation"]
        if "counts" not in seg or "size" not in seg:
            raise AnnotationError(f"annotation {r.get('id')}: segmentation needs counts and size")
        anns.append(
            Annotation(
                int(r["id"]),
                int(r["image_id"]),
                int(r["category_id"]),
                box,
                {"counts": [int(c) for c in seg["counts"]], "size": [int(s) for s in seg["size"]]},
                float(r["score"]) if "score" in r else None,
            )
        )
    return images, categories, anns


def write_image_labels(path, images: list[ImageInfo], categories: CategoryTable, labels: dict[int, list[int]]) -> None:
    """Image-label-only view; carries no boxes or masks by construction."""
    doc = {
        "images": [
            {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
            for im in images
        ],
        "categories": categories.to_json(),
        "labels": [
            {"image_id": im.id, "category_ids": sorted(labels.get(im.id, []))} for im in images
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_image_labels(path) -> tuple[list[ImageInfo], CategoryTable, dict[int, list[int]]]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("images", "categories", "labels"):
        if key not in doc:
            raise AnnotationError(f"{path}: missing top-level '{key}'")
    images = [
        ImageInfo(int(r["id"]), str(r["file_name"]), int(r["width"]), int(r["height"]))
        for r in doc["images"]
    ]
    categories = CategoryTable.from_json(doc["categories"])
    labels = {int(r["image_id"]): [int(c) for c in r["category_ids"]] for r in doc["labels"]}
    return images, categories, labels
