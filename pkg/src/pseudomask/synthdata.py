"""Synthetic scenes with exact ground truth.

Categories are color x shape tuples named like "red-disc"; novel categories
reuse base colors with held-out shapes so the open-vocabulary split shares
low-level statistics. Shapes are rasterized from analytic predicates at
pixel centers, so masks and boxes are exact. All intensities are quantized
to 8-bit levels, which makes the PPM round-trip lossless.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .actmap import ActivationMap
from .annotations import ImageInfo, make_annotation, write_annotations, write_image_labels
from .config import BASE, NOVEL, Category, CategoryTable
from .geometry import BBox
from .raster import BinaryMask, ImageGrid, write_ppm
from .rng import stream

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "green": (0.10, 0.70, 0.20),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.60, 0.20, 0.75),
    "orange": (0.95, 0.55, 0.10),
}

_DEFAULT_CATEGORIES = [
    # (name, split); novel shapes never appear in base categories
    ("red-disc", BASE),
    ("blue-square", BASE),
    ("green-triangle", BASE),
    ("yellow-bar", BASE),
    ("purple-diamond", BASE),
    ("orange-ellipse", BASE),
    ("red-ring", NOVEL),
    ("blue-cross", NOVEL),
    ("green-frame", NOVEL),
]


def default_category_table() -> CategoryTable:
    return CategoryTable(tuple(Category(i + 1, name, split) for i, (name, split) in enumerate(_DEFAULT_CATEGORIES)))


def _shape_predicate(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    if shape == "triangle":
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r / 3.0)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "ellipse":
        return (dx / r) ** 2 + (dy / (0.6 * r)) ** 2 <= 1.0
    if shape == "ring":
        dist2 = dx * dx + dy * dy
        return (dist2 <= r * r) & (dist2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return ((np.abs(dx) <= r / 3.0) & (np.abs(dy) <= r)) | ((np.abs(dx) <= r) & (np.abs(dy) <= r / 3.0))
    if shape == "frame":
        cheb = np.maximum(np.abs(dx), np.abs(dy))
        return (cheb <= r) & (cheb >= 0.55 * r)
    raise ValueError(f"unknown shape {shape!r}")


def parse_category_name(name: str) -> tuple[str, str]:
    """Split a "color-shape" category name and validate both halves."""
    color, _, shape = name.partition("-")
    if color not in COLORS:
        raise ValueError(f"category {name!r}: unknown color {color!r}")
    # validate shape eagerly with a probe evaluation
    _shape_predicate(shape, np.zeros((1, 1)), np.zeros((1, 1)), 1.0)
    return color, shape


@dataclass(frozen=True)
class Instance:
    category_id: int
    box: BBox
    mask: BinaryMask
    center: tuple[float, float]


@dataclass(frozen=True)
class SyntheticScene:
    image: ImageGrid
    instances: tuple[Instance, ...]

    @property
    def image_labels(self) -> set[int]:
        return {inst.category_id for inst in self.instances}


def _tight_box(bits: np.ndarray) -> BBox:
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    return BBox(float(x0), float(y0), float(x1 - x0 + 1), float(y1 - y0 + 1))


def _paint_clutter(img: np.ndarray, gx: np.ndarray, gy: np.ndarray, rng: np.random.Generator) -> None:
    """Palette-colored amorphous distractors (no ground truth attached).

    Clutter shares the category color palette but has in-between fill
    patterns (soft blobs, superellipses, half-discs), so appearance alone
    cannot cleanly separate it from real objects. Proposal ranking then has
    plenty of plausible non-objects to spend its budget on.
    """
    h, w = img.shape[:2]
    palette = list(COLORS.values())
    for _ in range(int(rng.integers(6, 13))):
        kind = int(rng.integers(3))
        color = np.clip(np.array(palette[int(rng.integers(len(palette)))]) * rng.uniform(0.7, 1.15), 0.0, 1.0)
        r = rng.uniform(w / 14.0, w / 5.0)
        cx, cy = rng.uniform(r, w - r), rng.uniform(r, h - r)
        dx, dy = gx - cx, gy - cy
        if kind == 0:  # soft-edged blob, reads as a fuzzy disc
            alpha = np.exp(-(dx * dx + dy * dy) / (2 * (r * 0.55) ** 2))
            img += alpha[:, :, None] * 0.9 * (color - img)
        elif kind == 1:  # superellipse, between a square and an ellipse
            b = r * rng.uniform(0.6, 1.0)
            region = (np.abs(dx) / r) ** 4 + (np.abs(dy) / b) ** 4 <= 1.0
            img[region] = color
        else:  # half-disc, between a disc and a triangle
            region = (dx * dx + dy * dy <= r * r) & (dy >= 0)
            img[region] = color


def generate_scene(
    categories: CategoryTable,
    rng: np.random.Generator,
    image_size: int = 128,
    occlusion_rate: float = 0.0,
    max_instances: int = 4,
    clutter: bool = True,
) -> SyntheticScene:
    """One textured-background scene with 1..max_instances shape instances."""
    if not (0.0 <= occlusion_rate <= 1.0):
        raise ValueError(f"occlusion_rate must be in [0, 1], got {occlusion_rate}")
    h = w = image_size
    img = 0.5 + 0.05 * (2.0 * rng.random((h, w, 3)) - 1.0)
    px = np.arange(w) + 0.5
    py = np.arange(h) + 0.5
    gx, gy = np.meshgrid(px, py)
    if clutter:
        _paint_clutter(img, gx, gy, rng)
    img = np.clip(img, 0.0, 1.0)

    n_instances = int(rng.integers(1, max_instances + 1))
    shape_masks: list[np.ndarray] = []
    drawn: list[tuple[int, np.ndarray, tuple[float, float]]] = []
    cats = list(categories)
    for _ in range(n_instances):
        cat = cats[int(rng.integers(len(cats)))]
        color_name, shape = parse_category_name(cat.name)
        allow_overlap = rng.random() < occlusion_rate
        for _attempt in range(40):
            r = float(rng.uniform(image_size / 10.0, image_size / 5.0))
            cx = float(rng.uniform(r + 2, w - r - 2))
            cy = float(rng.uniform(r + 2, h - r - 2))
            bits = _shape_predicate(shape, gx - cx, gy - cy, r)
            if not bits.any():
                continue
            overlaps = any((bits & prev).any() for prev in shape_masks)
            if overlaps and not allow_overlap:
                continue
            color = np.array(COLORS[color_name]) * float(rng.uniform(0.85, 1.1))
            img[bits] = np.clip(color, 0.0, 1.0)
            shape_masks.append(bits)
            drawn.append((cat.id, bits, (cx, cy)))
            break

    instances = []
    for i, (cat_id, bits, center) in enumerate(drawn):
        visible = bits.copy()
        for later in shape_masks[i + 1 :]:
            visible &= ~later
        if visible.sum() < 25:
            continue
        instances.append(Instance(cat_id, _tight_box(visible), BinaryMask(visible), center))

    data = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5) / 255.0
    return SyntheticScene(image=ImageGrid(data), instances=tuple(instances))


def generate_dataset(
    num_images: int,
    categories: CategoryTable,
    occlusion_rate: float,
    seed: int,
    image_size: int = 128,
) -> list[tuple[ImageInfo, SyntheticScene]]:
    """Deterministic list of (image info, scene); per-image derived seeds."""
    out = []
    for idx in range(num_images):
        rng = stream(seed, f"synth/image/{idx}")
        scene = generate_scene(categories, rng, image_size=image_size, occlusion_rate=occlusion_rate)
        if not scene.instances:  # rejection left nothing usable; degenerate and rare
            rng = stream(seed, f"synth/image/{idx}/retry")
            scene = generate_scene(categories, rng, image_size=image_size, occlusion_rate=0.0)
        info = ImageInfo(id=idx, file_name=f"img_{idx:06d}.ppm", width=image_size, height=image_size)
        out.append((info, scene))
    return out


def write_dataset(dataset: list[tuple[ImageInfo, SyntheticScene]], categories: CategoryTable, out_dir) -> None:
    """Write PPM images, GT annotations, and the label-only view."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images = []
    annotations = []
    labels: dict[int, list[int]] = {}
    ann_id = 1
    for info, scene in dataset:
        write_ppm(scene.image, out / "images" / info.file_name)
        images.append(info)
        labels[info.id] = sorted(scene.image_labels)
        for inst in scene.instances:
            annotations.append(make_annotation(ann_id, info.id, inst.category_id, inst.box, inst.mask))
            ann_id += 1
    write_annotations(out / "annotations.json", images, categories, annotations)
    write_image_labels(out / "image_labels.json", images, categories, labels)


def _blob(
    h_f: int, w_f: int, center_xy: tuple[float, float], spread_cells: float, factor: int
) -> np.ndarray:
    cx, cy = center_xy[0] / factor, center_xy[1] / factor
    xs = np.arange(w_f) + 0.5
    ys = np.arange(h_f) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    s = max(spread_cells, 1e-6)
    return np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2.0 * s * s))


def oracle_activation(
    scene: SyntheticScene,
    category_id: int,
    blob_spread: float,
    noise: float,
    seed: int,
    downsample_factor: int = 16,
) -> ActivationMap:
    """Test-double activation: a Gaussian blob per instance of the category.

    blob_spread scales the blob width relative to instance size; noise adds
    seeded perturbations (clipped so values stay non-negative).
    """
    present = [inst for inst in scene.instances if inst.category_id == category_id]
    if not present:
        raise ValueError(f"category {category_id} not present in scene")
    h_f = scene.image.height // downsample_factor
    w_f = scene.image.width // downsample_factor
    values = np.zeros((h_f, w_f))
    for inst in present:
        spread_cells = blob_spread * max(inst.box.w, inst.box.h) / downsample_factor
        values += _blob(h_f, w_f, inst.center, spread_cells, downsample_factor)
    if noise > 0.0:
        rng = stream(seed, f"oracle/{category_id}")
        values = values + noise * rng.normal(size=values.shape)
    return ActivationMap(values=np.maximum(values, 0.0), category_id=category_id, iteration=0)


def instance_parts(inst: Instance, max_parts: int = 4) -> list[tuple[float, float]]:
    """Quadrant centroids of an instance mask, most-populated first.

    These play the role of an object's progressively less discriminative
    regions: an activation source reveals them one at a time as masking
    suppresses the earlier ones.
    """
    bits = inst.mask.bits
    ys, xs = np.nonzero(bits)
    cx, cy = inst.center
    quads = [
        (xs < cx) & (ys < cy),
        (xs >= cx) & (ys < cy),
        (xs < cx) & (ys >= cy),
        (xs >= cx) & (ys >= cy),
    ]
    sized = [(int(q.sum()), q) for q in quads]
    sized.sort(key=lambda t: -t[0])
    parts = [
        (float(xs[q].mean()) + 0.5, float(ys[q].mean()) + 0.5)
        for count, q in sized[:max_parts]
        if count >= 4
    ]
    return parts or [inst.center]


def make_masking_aware_oracle(
    scene: SyntheticScene,
    category_id: int,
    blob_spread: float = 0.3,
    noise: float = 0.0,
    seed: int = 0,
    downsample_factor: int = 16,
    max_parts: int = 4,
):
    """Activation source whose focus shifts when its current blob is masked.

    Each instance exposes up to four parts (quadrant centroids). Every
    evaluation puts a blob on the first part whose pixels are still
    unmodified; once masking has replaced a part, the next one lights up,
    and a fully masked instance goes quiet. This mirrors attention shifting
    to less discriminative regions under masking and gives the masking loop
    something real to uncover at every iteration.
    """
    present = [inst for inst in scene.instances if inst.category_id == category_id]
    if not present:
        raise ValueError(f"category {category_id} not present in scene")
    h_f = scene.image.height // downsample_factor
    w_f = scene.image.width // downsample_factor
    original = scene.image.data
    rng = stream(seed, f"oracle-ma/{category_id}")
    parts_per_instance = [instance_parts(inst, max_parts) for inst in present]

    def part_masked(img: ImageGrid, center: tuple[float, float], radius: float) -> bool:
        cx, cy = center
        x0, x1 = max(int(cx - radius), 0), min(int(cx + radius) + 1, scene.image.width)
        y0, y1 = max(int(cy - radius), 0), min(int(cy + radius) + 1, scene.image.height)
        if x1 <= x0 or y1 <= y0:
            return False
        changed = (img.data[y0:y1, x0:x1] != original[y0:y1, x0:x1]).any(axis=2)
        return float(changed.mean()) >= 0.5

    def evaluate(img: ImageGrid) -> ActivationMap:
        values = np.zeros((h_f, w_f))
        for inst, parts in zip(present, parts_per_instance):
            radius = max(inst.box.w, inst.box.h) / 4.0
            spread_cells = blob_spread * max(inst.box.w, inst.box.h) / downsample_factor
            for center in parts:
                if not part_masked(img, center, radius):
                    values += _blob(h_f, w_f, center, spread_cells, downsample_factor)
                    break
        if noise > 0.0:
            # noise rides on the live signal; a fully masked-out scene stays quiet
            values = values + noise * float(values.max()) * rng.normal(size=values.shape)
        return ActivationMap(values=np.maximum(values, 0.0), category_id=category_id, iteration=0)

    return evaluate
