"""End-to-end pseudo-annotation generation.

Chains, per (image, present label): activation evidence -> masking union ->
candidate ranking -> box selection -> point-supervised segmentation. The
activation source is pluggable (toy encoder, scripted oracle, or AMAP
files), and every stochastic step draws from a stream named by image and
category so parallel execution cannot change results.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import actmap as am
from . import proposal as pr
from . import synthdata as sd
from . import vlm
from .annotations import Annotation, ImageInfo, make_annotation, read_annotations, read_image_labels
from .boxselect import NoActivationError, select_pseudo_box
from .config import CategoryTable, PipelineConfig
from .containers import read_amap
from .geometry import rasterize
from .raster import ImageGrid, read_ppm
from .rng import stream
from .wss import (
    PatchTooSmallError,
    UninformativeActivationError,
    assemble_pseudo_annotation,
    sample_points,
    train_patch_segmenter,
)

MODES = ("toy-vlm", "oracle-stub", "file")


@dataclass
class PipelineResult:
    annotations: list[Annotation]
    skips: dict[str, int]
    attempts: int
    candidates: dict[int, "pr.ProposalSet"] | None = None


def scene_from_annotations(img: ImageGrid, anns: list[Annotation]) -> sd.SyntheticScene:
    """Rebuild a scene view (instances with masks/centers) from GT records."""
    instances = []
    for a in anns:
        mask = a.mask()
        ys, xs = np.nonzero(mask.bits)
        if len(ys) == 0:
            continue
        center = (float(xs.mean()) + 0.5, float(ys.mean()) + 0.5)
        instances.append(sd.Instance(a.category_id, a.bbox, mask, center))
    return sd.SyntheticScene(image=img, instances=tuple(instances))


def _cell_overlaps(scene: sd.SyntheticScene, categories: CategoryTable, factor: int) -> np.ndarray:
    """Per-cell mask-overlap fraction per category index; (h_f, w_f, N_C)."""
    h_f = scene.image.height // factor
    w_f = scene.image.width // factor
    out = np.zeros((h_f, w_f, len(categories)))
    index = {cid: i for i, cid in enumerate(categories.ids())}
    for inst in scene.instances:
        bits = inst.mask.bits[: h_f * factor, : w_f * factor]
        frac = bits.reshape(h_f, factor, w_f, factor).mean(axis=(1, 3))
        out[:, :, index[inst.category_id]] += frac
    return np.minimum(out, 1.0)


def make_toy_vlm_source(
    scene: sd.SyntheticScene,
    categories: CategoryTable,
    params: vlm.VlmParams,
    layer: int,
    seed: int,
    image_id: int,
    noise: float = 0.25,
    align_scale: float = 4.0,
    factor: int = 16,
):
    """Activation source backed by the toy encoder.

    Region features carry each category's embedding in proportion to the
    cell's instance overlap, attenuated by the fraction of cell pixels the
    masking loop has replaced; a fixed noise draw keeps repeat evaluations
    deterministic.
    """
    overlaps = _cell_overlaps(scene, categories, factor)
    h_f, w_f = overlaps.shape[:2]
    cat_ids = categories.ids()
    emb = np.stack([params.token_embeddings[vlm.category_token(i)] for i in range(len(cat_ids))])
    original = scene.image.data

    def source(category_id: int):
        cat_index = cat_ids.index(category_id)
        rng = stream(seed, f"toyvlm/noise/{image_id}/{category_id}")
        noise_r = noise * rng.normal(size=(h_f * w_f, params.d))
        text = vlm.text_seq(params, [vlm.category_token(cat_index)], 0)

        def evaluate(img: ImageGrid) -> am.ActivationMap:
            changed = (img.data != original).any(axis=2)
            masked_frac = changed[: h_f * factor, : w_f * factor].reshape(
                h_f, factor, w_f, factor
            ).mean(axis=(1, 3))
            eff = overlaps * (1.0 - masked_frac)[:, :, None]
            aligned = align_scale * eff.reshape(-1, len(cat_ids)) @ emb
            grid = vlm.FeatureGrid(h_f=h_f, w_f=w_f, R=aligned + noise_r, downsample_factor=factor)
            return vlm.gradcam(params, grid, text, layer, category_id=category_id)

        return evaluate

    return source


def make_oracle_source(scene: sd.SyntheticScene, seed: int, noise: float, blob_spread: float = 0.4):
    def source(category_id: int):
        return sd.make_masking_aware_oracle(
            scene, category_id, blob_spread=blob_spread, noise=noise, seed=seed
        )

    return source


def make_file_source(amap_entries: dict[int, np.ndarray]):
    """Constant-map source: file evidence is independent of masking."""

    def source(category_id: int):
        if category_id not in amap_entries:
            raise NoActivationError(f"no stored activation for category {category_id}")
        values = amap_entries[category_id]

        def evaluate(_img: ImageGrid) -> am.ActivationMap:
            return am.ActivationMap(values=values, category_id=category_id, iteration=0)

        return evaluate

    return source


def guidance_to_pixels(guidance: am.GuidanceMap, height: int, width: int, mode: str) -> np.ndarray:
    """Binary union at pixel resolution (bilinear thresholds at 0.5)."""
    if mode == "nearest":
        return am.upsample(guidance.union_bits, height, width, "nearest").astype(bool)
    soft = am.upsample(guidance.union_bits.astype(np.float64), height, width, "bilinear")
    return soft >= 0.5


def candidate_boxes(
    img: ImageGrid,
    cfg: PipelineConfig,
    model: pr.WspnModel | None,
) -> pr.ProposalSet:
    """Top-K candidates: weak-network ranking, or a fixed contrast heuristic."""
    props = pr.unsupervised_proposals(img, seed=cfg.seed)
    feats = pr.proposal_features(img, props)
    if model is not None:
        return pr.top_k_features(model, feats, props, cfg.K)
    contrast = feats[:, 4]  # interior-vs-ring color difference
    order = sorted(range(len(props)), key=lambda i: (-contrast[i], -props.boxes[i].area, i))
    keep = order[: min(cfg.K, len(order))]
    return pr.ProposalSet(
        boxes=tuple(props.boxes[i] for i in keep), source="unsupervised", scores=contrast[keep]
    )


def generate_for_image(
    image_id: int,
    img: ImageGrid,
    label_ids: list[int],
    source,
    cfg: PipelineConfig,
    model: pr.WspnModel | None,
) -> tuple[list, dict[str, int], int, pr.ProposalSet]:
    """All pseudo annotations for one image plus the candidate set used."""
    skips = {"no-activation": 0, "uninformative-activation": 0, "patch-too-small": 0, "degenerate-mask": 0}
    results = []
    attempts = 0
    candidates = candidate_boxes(img, cfg, model)
    provenance = {"G": cfg.G, "K": cfg.K, "upsample_mode": cfg.upsample_mode}
    for category_id in sorted(label_ids):
        attempts += 1
        evaluate = source(category_id)
        guidance = am.iterative_masking(evaluate, img, cfg.G, cfg.threshold, cfg.upsample_mode)
        try:
            pixel_bits = guidance_to_pixels(guidance, img.height, img.width, cfg.upsample_mode)
            if cfg.soft_box_guidance:
                soft = am.upsample(guidance.soft_union, img.height, img.width, cfg.upsample_mode)
                pseudo_box = select_pseudo_box(candidates, soft, category_id, use_soft=True, provenance=provenance)
            else:
                pseudo_box = select_pseudo_box(candidates, pixel_bits, category_id, provenance=provenance)
        except NoActivationError:
            skips["no-activation"] += 1
            continue
        x0, y0, x1, y1 = rasterize(pseudo_box.box, img.width, img.height)
        soft_pixels = am.upsample(guidance.soft_union, img.height, img.width, cfg.upsample_mode)
        patch_act = soft_pixels[y0:y1, x0:x1]
        try:
            points = sample_points(patch_act, cfg.Z, stream(cfg.seed, f"wss/points/{image_id}/{category_id}"))
        except PatchTooSmallError:
            skips["patch-too-small"] += 1
            continue
        except UninformativeActivationError:
            skips["uninformative-activation"] += 1
            continue
        patch = ImageGrid(img.data[y0:y1, x0:x1])
        seg = train_patch_segmenter(
            patch,
            points,
            cfg.wss,
            rng=stream(cfg.seed, f"wss/init/{image_id}/{category_id}"),
        )
        ann = assemble_pseudo_annotation(pseudo_box, seg, img.width, img.height)
        if ann.degenerate:
            skips["degenerate-mask"] += 1
            continue
        results.append((category_id, ann))
    return results, skips, attempts, candidates


@dataclass
class _ImageTask:
    image_id: int
    image_path: str
    label_ids: list[int]
    gt: list[Annotation]
    mode: str
    amap_path: str | None


_WORKER_STATE: dict = {}


def _init_worker(cfg: PipelineConfig, categories: CategoryTable, model: pr.WspnModel | None, noise: float, layer: int):
    _WORKER_STATE["cfg"] = cfg
    _WORKER_STATE["categories"] = categories
    _WORKER_STATE["model"] = model
    _WORKER_STATE["noise"] = noise
    _WORKER_STATE["layer"] = layer
    _WORKER_STATE["params"] = None


def _run_task(task: _ImageTask):
    cfg: PipelineConfig = _WORKER_STATE["cfg"]
    categories: CategoryTable = _WORKER_STATE["categories"]
    model = _WORKER_STATE["model"]
    noise = _WORKER_STATE["noise"]
    layer = _WORKER_STATE["layer"]
    img = read_ppm(task.image_path)
    if task.mode == "file":
        entries = dict(read_amap(task.amap_path))
        source = make_file_source(entries)
    elif task.mode == "oracle-stub":
        scene = scene_from_annotations(img, task.gt)
        source = make_oracle_source(scene, cfg.seed, noise)
    else:
        if _WORKER_STATE["params"] is None:
            _WORKER_STATE["params"] = vlm.make_aligned_params(
                stream(cfg.seed, "toyvlm/params"), n_layers=layer, d=16, n_categories=len(categories)
            )
        scene = scene_from_annotations(img, task.gt)
        source = make_toy_vlm_source(
            scene, categories, _WORKER_STATE["params"], layer, cfg.seed, task.image_id, factor=16
        )
    results, skips, attempts, candidates = generate_for_image(
        task.image_id, img, task.label_ids, source, cfg, model
    )
    return task.image_id, results, skips, attempts, candidates


def run_pipeline(
    dataset_dir,
    cfg: PipelineConfig,
    mode: str,
    model: pr.WspnModel | None,
    amap_dir=None,
    workers: int = 1,
    noise: float = 0.1,
) -> tuple[list[ImageInfo], CategoryTable, PipelineResult]:
    """Generate pseudo annotations for a dataset directory."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    data = Path(dataset_dir)
    images, categories, labels = read_image_labels(data / "image_labels.json")
    gt_by_image: dict[int, list[Annotation]] = {im.id: [] for im in images}
    if mode in ("oracle-stub", "toy-vlm"):
        _, _, gt_anns = read_annotations(data / "annotations.json")
        for a in gt_anns:
            gt_by_image.setdefault(a.image_id, []).append(a)

    tasks = []
    for im in images:
        amap_path = str(Path(amap_dir) / f"{im.id:06d}.amap") if amap_dir is not None else None
        if mode == "file" and (amap_path is None or not os.path.exists(amap_path)):
            raise FileNotFoundError(f"missing activation container for image {im.id}: {amap_path}")
        tasks.append(
            _ImageTask(
                image_id=im.id,
                image_path=str(data / "images" / im.file_name),
                label_ids=labels.get(im.id, []),
                gt=gt_by_image.get(im.id, []),
                mode=mode,
                amap_path=amap_path,
            )
        )

    layer = cfg.m
    outputs = {}
    if workers <= 1:
        _init_worker(cfg, categories, model, noise, layer)
        for t in tasks:
            image_id, results, skips, attempts, candidates = _run_task(t)
            outputs[image_id] = (results, skips, attempts, candidates)
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(cfg, categories, model, noise, layer)
        ) as pool:
            for image_id, results, skips, attempts, candidates in pool.map(_run_task, tasks):
                outputs[image_id] = (results, skips, attempts, candidates)

    annotations: list[Annotation] = []
    total_skips = {"no-activation": 0, "uninformative-activation": 0, "patch-too-small": 0, "degenerate-mask": 0}
    total_attempts = 0
    per_image_candidates: dict[int, pr.ProposalSet] = {}
    ann_id = 1
    for image_id in sorted(outputs):
        results, skips, attempts, candidates = outputs[image_id]
        total_attempts += attempts
        per_image_candidates[image_id] = candidates
        for k, v in skips.items():
            total_skips[k] += v
        for category_id, pa in results:
            annotations.append(
                make_annotation(ann_id, image_id, category_id, pa.box, pa.mask, score=pa.score)
            )
            ann_id += 1
    return images, categories, PipelineResult(
        annotations=annotations, skips=total_skips, attempts=total_attempts, candidates=per_image_candidates
    )


def export_activation_maps(
    dataset_dir,
    out_dir,
    cfg: PipelineConfig,
    mode: str,
    noise: float = 0.1,
    combine: bool = True,
) -> list[Path]:
    """Write one AMAP container per image (entries keyed by category).

    With combine=True the stored grid is the masking loop's soft union;
    otherwise it is the raw first-pass activation.
    """
    from .containers import write_amap

    if mode == "file":
        raise ValueError("gen-actmaps needs an in-process mode (toy-vlm or oracle-stub)")
    data = Path(dataset_dir)
    images, categories, labels = read_image_labels(data / "image_labels.json")
    _, _, gt_anns = read_annotations(data / "annotations.json")
    gt_by_image: dict[int, list[Annotation]] = {}
    for a in gt_anns:
        gt_by_image.setdefault(a.image_id, []).append(a)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    params = None
    for im in images:
        img = read_ppm(data / "images" / im.file_name)
        scene = scene_from_annotations(img, gt_by_image.get(im.id, []))
        if mode == "oracle-stub":
            source = make_oracle_source(scene, cfg.seed, noise)
        else:
            if params is None:
                params = vlm.make_aligned_params(
                    stream(cfg.seed, "toyvlm/params"), n_layers=cfg.m, d=16, n_categories=len(categories)
                )
            source = make_toy_vlm_source(scene, categories, params, cfg.m, cfg.seed, im.id, factor=16)
        entries = []
        for category_id in sorted(labels.get(im.id, [])):
            evaluate = source(category_id)
            if combine:
                guidance = am.iterative_masking(evaluate, img, cfg.G, cfg.threshold, cfg.upsample_mode)
                entries.append((category_id, guidance.soft_union))
            else:
                entries.append((category_id, evaluate(img).values))
        path = out / f"{im.id:06d}.amap"
        write_amap(path, entries)
        written.append(path)
    return written
