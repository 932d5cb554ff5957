"""Golden end-to-end pipeline shared by the acceptance test and the
one-time scripts that froze the committed values."""

from collections import defaultdict
from pathlib import Path

import numpy as np

from pseudomask import cli
from pseudomask import proposal as pr
from pseudomask.annotations import read_annotations
from pseudomask.geometry import iou
from pseudomask.raster import mask_iou, read_ppm

GOLDEN_NUM_IMAGES = 50
GOLDEN_IMAGE_SIZE = 192
GOLDEN_SEED = 0


def run_golden_pipeline(root: Path) -> dict:
    """Synth -> gen-pseudo at the pinned operating point.

    Candidates come from the unsupervised proposer's contrast ranking (the
    selective-search-style configuration); returns mean pseudo-box IoU and
    pseudo-mask IoU against ground truth plus the per-pair best-achievable
    bound over the same candidate sets.
    """
    from pseudomask.config import PipelineConfig
    from pseudomask.pipeline import candidate_boxes

    data = root / "data"
    assert cli.main([
        "synth", "--out", str(data),
        "--num-images", str(GOLDEN_NUM_IMAGES),
        "--image-size", str(GOLDEN_IMAGE_SIZE),
        "--seed", str(GOLDEN_SEED),
    ]) == 0
    out = root / "pl"
    assert cli.main([
        "gen-pseudo", "--data", str(data), "--out", str(out), "--mode", "oracle-stub",
        "--seed", str(GOLDEN_SEED),
        "--g", "3", "--k", "50", "--z", "10", "--noise", "0.1",
    ]) == 0

    images, cats, gt = read_annotations(data / "annotations.json")
    _, _, pseudo = read_annotations(out / "pseudo_annotations.json")
    gt_by = defaultdict(list)
    for g in gt:
        gt_by[(g.image_id, g.category_id)].append(g)

    cfg = PipelineConfig(seed=GOLDEN_SEED)
    candidates = {}
    info_by_id = {im.id: im for im in images}

    box_ious = []
    mask_ious = []
    bound_violations = 0
    for a in pseudo:
        matches = gt_by.get((a.image_id, a.category_id), [])
        assert matches, "pseudo annotation for a category absent from GT"
        box_iou = max(iou(a.bbox, g.bbox) for g in matches)
        box_ious.append(box_iou)
        amask = a.mask()
        mask_ious.append(max(mask_iou(amask, g.mask()) for g in matches))
        if a.image_id not in candidates:
            img = read_ppm(data / "images" / info_by_id[a.image_id].file_name)
            candidates[a.image_id] = candidate_boxes(img, cfg, None)
        best_achievable = max(
            max(iou(c, g.bbox) for g in matches) for c in candidates[a.image_id].boxes
        )
        if box_iou > best_achievable + 1e-12:
            bound_violations += 1

    return {
        "n_annotations": len(pseudo),
        "mean_box_iou": float(np.mean(box_ious)),
        "mean_mask_iou": float(np.mean(mask_ious)),
        "bound_violations": bound_violations,
        "annotation_bytes": (out / "pseudo_annotations.json").read_bytes(),
    }
