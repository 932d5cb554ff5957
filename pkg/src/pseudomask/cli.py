"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 validation/input error, 3 degenerate-input skips
above the allowed fraction. Every stage writes exactly one manifest.json
into its output directory recording config, seed, paths, and timings.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import evalbench as ev
from . import ovclassify as ov
from . import proposal as pr
from .annotations import AnnotationError, read_annotations, read_image_labels
from .config import ConfigError, PipelineConfig, config_to_flat_json, load_config, override
from .containers import FormatError, read_amap, read_array_blob, read_cemb, write_array_blob
from .geometry import iou as box_iou
from .pipeline import export_activation_maps, run_pipeline
from .raster import read_ppm
from .rng import stream
from .synthdata import default_category_table, generate_dataset, write_dataset
from .annotations import write_annotations

EMBH_MAGIC = b"EMBH"
EMBH_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SKIPS = 3


def _version_string() -> str:
    return f"pseudomask-{__version__}"


def write_manifest(out_dir: Path, stage: str, cfg: PipelineConfig, inputs: dict, outputs: dict, timings: dict) -> None:
    doc = {
        "version": _version_string(),
        "stage": stage,
        "config": config_to_flat_json(cfg),
        "seed": cfg.seed,
        "inputs": inputs,
        "outputs": outputs,
        "timings": timings,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    return override(
        cfg,
        seed=getattr(args, "seed", None),
        G=getattr(args, "g", None),
        K=getattr(args, "k", None),
        Z=getattr(args, "z", None),
        threshold=getattr(args, "threshold", None),
        upsample_mode=getattr(args, "upsample", None),
    )


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    return max(1, int(os.environ.get("PMF_WORKERS", "1")))


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    categories = default_category_table()
    dataset = generate_dataset(args.num_images, categories, args.occlusion_rate, cfg.seed, args.image_size)
    write_dataset(dataset, categories, out)
    write_manifest(
        out,
        "synth",
        cfg,
        inputs={"num_images": args.num_images, "occlusion_rate": args.occlusion_rate, "image_size": args.image_size},
        outputs={"annotations": str(out / "annotations.json"), "image_labels": str(out / "image_labels.json")},
        timings={"total_s": time.time() - t0},
    )
    print(f"wrote {args.num_images} images + annotations to {out}")
    return EXIT_OK


def cmd_train_wspn(args) -> int:
    cfg = _load_cfg(args)
    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    images, categories, labels = read_image_labels(data / "image_labels.json")
    dataset = []
    for im in images:
        img = read_ppm(data / "images" / im.file_name)
        dataset.append((img, set(labels.get(im.id, []))))
    result = pr.train_wspn(dataset, categories, cfg.wspn, seed=cfg.seed)
    model_path = out / "wspn.bin"
    pr.save_wspn(result.model, model_path)
    with open(out / "loss_curve.json", "w", encoding="utf-8") as fh:
        json.dump({"loss": result.loss_curve.tolist()}, fh)
        fh.write("\n")
    write_manifest(
        out,
        "train-wspn",
        cfg,
        inputs={"data": str(data), "images": len(images)},
        outputs={"model": str(model_path)},
        timings={"total_s": time.time() - t0},
    )
    print(f"trained weak proposal network on {len(images)} images -> {model_path}")
    return EXIT_OK


def cmd_gen_actmaps(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    if args.mode == "file":
        # ingestion: validate external containers and copy them into the run dir
        src = Path(args.inp)
        paths = sorted(src.glob("*.amap")) if src.is_dir() else [src]
        if not paths:
            raise FileNotFoundError(f"no .amap files under {src}")
        written = []
        for p in paths:
            entries = read_amap(p)  # validates magic/version/payload
            from .containers import write_amap

            dest = out / p.name
            write_amap(dest, entries)
            written.append(dest)
    else:
        written = export_activation_maps(args.data, out, cfg, args.mode, noise=args.noise, combine=not args.raw)
    write_manifest(
        out,
        "gen-actmaps",
        cfg,
        inputs={"data": args.data, "mode": args.mode, "in": getattr(args, "inp", None), "noise": args.noise},
        outputs={"count": len(written)},
        timings={"total_s": time.time() - t0},
    )
    print(f"wrote {len(written)} activation containers to {out}")
    return EXIT_OK


def cmd_gen_pseudo(args) -> int:
    cfg = _load_cfg(args)
    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    model = pr.load_wspn(args.wspn) if args.wspn else None
    images, categories, result = run_pipeline(
        data,
        cfg,
        args.mode,
        model,
        amap_dir=args.inp,
        workers=_workers(args),
        noise=args.noise,
    )
    ann_path = out / "pseudo_annotations.json"
    write_annotations(ann_path, images, categories, result.annotations)
    if args.dump_proposals and result.candidates is not None:
        pr.write_proposals_json(out / "proposals.json", result.candidates)
    skipped = sum(result.skips.values())
    write_manifest(
        out,
        "gen-pseudo",
        cfg,
        inputs={"data": str(data), "mode": args.mode, "wspn": args.wspn, "in": args.inp, "noise": args.noise},
        outputs={
            "annotations": str(ann_path),
            "n_annotations": len(result.annotations),
            "attempts": result.attempts,
            "skips": result.skips,
        },
        timings={"total_s": time.time() - t0},
    )
    frac = skipped / result.attempts if result.attempts else 0.0
    print(
        f"generated {len(result.annotations)} pseudo annotations "
        f"({skipped}/{result.attempts} skipped) -> {ann_path}"
    )
    if frac > args.max_skip_frac:
        print(f"skip fraction {frac:.2f} exceeds allowed {args.max_skip_frac}", file=sys.stderr)
        return EXIT_SKIPS
    return EXIT_OK


def cmd_train_embed(args) -> int:
    cfg = _load_cfg(args)
    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    images, categories, anns = read_annotations(args.pseudo)
    by_image: dict[int, list] = {}
    for a in anns:
        by_image.setdefault(a.image_id, []).append(a)

    cat_ids = tuple(categories.ids())
    rng = stream(cfg.seed, "embed/classes")
    if args.cemb:
        space = ov.space_from_cemb(args.cemb, pr.FEATURE_DIM, rng)
        if set(space.class_ids) != set(cat_ids):
            raise ConfigError("embedding container classes do not match dataset categories")
    else:
        emb = rng.normal(size=(len(cat_ids), 16))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        space = ov.init_space(cat_ids, emb, pr.FEATURE_DIM, rng)

    feats = []
    targets = []
    info_by_id = {im.id: im for im in images}
    index = {cid: i for i, cid in enumerate(space.class_ids)}
    for image_id, rows in sorted(by_image.items()):
        im = info_by_id[image_id]
        img = read_ppm(data / "images" / im.file_name)
        imgf = pr.ImageFeatures(img)
        for a in rows:
            feats.append(pr.box_features(imgf, a.bbox))
            targets.append(index[a.category_id] + 1)
        # background samples: random grid boxes far from every annotation
        bg_rng = stream(cfg.seed, f"embed/bg/{image_id}")
        props = pr.unsupervised_proposals(img, seed=cfg.seed)
        order = bg_rng.permutation(len(props.boxes))
        picked = 0
        for i in order:
            b = props.boxes[i]
            if all(box_iou(b, a.bbox) < 0.3 for a in rows):
                feats.append(pr.box_features(imgf, b))
                targets.append(0)
                picked += 1
            if picked >= max(1, len(rows)):
                break
    result = ov.train_embedding_head(
        np.stack(feats), np.array(targets), space, cfg.embed, cfg.bg_weight, cfg.bg_weight_mode
    )
    trained = result.space
    correct = 0
    for f, t in zip(feats, targets):
        probs = ov.region_class_probs(trained, f)
        correct += int(np.argmax(probs) == t)
    accuracy = correct / len(targets)

    cemb_path = out / "class_embeddings.cemb"
    ov.export_space(trained, cemb_path)
    head_path = out / "embed_head.bin"
    write_array_blob(head_path, EMBH_MAGIC, EMBH_VERSION, [len(trained.class_ids)], [trained.head, trained.bg])
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump({"train_accuracy": accuracy, "final_loss": float(result.loss_curve[-1])}, fh, indent=2)
        fh.write("\n")
    write_manifest(
        out,
        "train-embed",
        cfg,
        inputs={"data": str(data), "pseudo": args.pseudo, "cemb": args.cemb, "n_regions": len(targets)},
        outputs={"cemb": str(cemb_path), "head": str(head_path), "train_accuracy": accuracy},
        timings={"total_s": time.time() - t0},
    )
    print(f"trained embedding head on {len(targets)} regions, train accuracy {accuracy:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    images, categories, gt = read_annotations(args.gt)
    _, _, preds = read_annotations(args.pred)
    report = ev.split_eval(images, categories, gt, preds, args.setting, k=cfg.K)
    ev.write_report_json(report, out / "report.json")
    ev.write_report_csv(report, out / "per_class.csv")
    ev.write_recall_csv(
        {c.name: {"predictions": c.recall_at_k} for c in report.per_class},
        out / "recall_by_category.csv",
    )
    write_manifest(
        out,
        "eval",
        cfg,
        inputs={"gt": args.gt, "pred": args.pred, "setting": args.setting, "k": cfg.K},
        outputs={"report": str(out / "report.json")},
        timings={"total_s": time.time() - t0},
    )
    box = report.map50_box
    mask = report.map50_mask
    print(f"setting={args.setting} mAP50(box): novel={box['novel']} base={box['base']} all={box['all']}")
    print(f"setting={args.setting} mAP50(mask): novel={mask['novel']} base={mask['base']} all={mask['all']}")
    return EXIT_OK


def _inspect_one(path: Path) -> None:
    if path.suffix == ".json":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if isinstance(doc, dict) and {"images", "categories", "annotations"} <= set(doc):
            print(f"{path}: annotation file, {len(doc['images'])} images, "
                  f"{len(doc['categories'])} categories, {len(doc['annotations'])} annotations")
        elif isinstance(doc, dict) and {"images", "categories", "labels"} <= set(doc):
            print(f"{path}: image-label view, {len(doc['images'])} images")
        elif isinstance(doc, dict) and "stage" in doc and "config" in doc:
            print(f"{path}: manifest for stage {doc['stage']!r}, version {doc.get('version')}, seed {doc.get('seed')}")
        else:
            print(f"{path}: JSON with keys {sorted(doc) if isinstance(doc, dict) else type(doc).__name__}")
        return
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"AMAP":
        entries = read_amap(path)
        dims = {f"{g.shape[0]}x{g.shape[1]}" for _, g in entries}
        print(f"{path}: AMAP with {len(entries)} activation grids, dims {sorted(dims)}")
    elif magic == b"CEMB":
        entries = read_cemb(path)
        print(f"{path}: CEMB with {len(entries)} class embeddings, d={entries[0][1].size if entries else 0}")
    elif magic == b"TVLM":
        from .vlm import load_params

        p = load_params(path)
        print(f"{path}: TVLM params, M={p.n_layers}, d={p.d}, vocab={p.vocab_size}")
    elif magic == b"WSPN":
        model = pr.load_wspn(path)
        print(f"{path}: WSPN checkpoint, classes={model.class_ids}, hidden={model.w1.shape[1]}")
    elif magic == EMBH_MAGIC:
        meta, arrays = read_array_blob(path, EMBH_MAGIC, EMBH_VERSION)
        print(f"{path}: embedding head, classes={meta[0]}, head shape {arrays[0].shape}")
    else:
        print(f"{path}: unknown format (magic {magic!r})")


def cmd_inspect(args) -> int:
    for p in args.paths:
        _inspect_one(Path(p))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudomask", description=__doc__)
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None, help="worker processes (default $PMF_WORKERS or 1)")

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num-images", type=int, default=50)
    p.add_argument("--occlusion-rate", type=float, default=0.0)
    p.add_argument("--image-size", type=int, default=128)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-wspn", help="train the weakly-supervised proposal network")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_wspn)

    p = sub.add_parser("gen-actmaps", help="export activation maps as AMAP containers")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["toy-vlm", "oracle-stub", "file"], default="oracle-stub")
    p.add_argument("--in", dest="inp", default=None, help="source .amap file or directory (mode=file)")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--raw", action="store_true", help="store first-pass maps instead of the masking union")
    p.add_argument("--g", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_gen_actmaps)

    p = sub.add_parser("gen-pseudo", help="generate pseudo box+mask annotations")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["toy-vlm", "oracle-stub", "file"], default="oracle-stub")
    p.add_argument("--in", dest="inp", default=None, help="directory of per-image .amap files (mode=file)")
    p.add_argument("--wspn", default=None, help="WSPN checkpoint; omit to rank raw proposals by area")
    p.add_argument("--g", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--z", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--upsample", choices=["nearest", "bilinear"], default=None)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--max-skip-frac", type=float, default=0.5)
    p.add_argument("--dump-proposals", action="store_true", help="also write per-image candidate boxes")
    p.set_defaults(func=cmd_gen_pseudo)

    p = sub.add_parser("train-embed", help="train the region embedding head on pseudo annotations")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pseudo", required=True, help="pseudo annotation JSON")
    p.add_argument("--cemb", default=None, help="optional class-embedding container")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_embed)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--setting", choices=["constrained", "generalized"], default="generalized")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="describe artifact files")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, AnnotationError, FormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
