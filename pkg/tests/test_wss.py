import numpy as np
import pytest

from pseudomask import wss
from pseudomask.annotations import make_annotation, read_annotations, write_annotations
from pseudomask.boxselect import PseudoBox
from pseudomask.config import Category, CategoryTable, TrainSchedule
from pseudomask.geometry import BBox
from pseudomask.raster import BinaryMask, ImageGrid

from conftest import make_rng


def test_sample_points_total_order():
    act = np.arange(1.0, 13.0).reshape(3, 4)  # distinct values 1..12
    pts = wss.sample_points(act, z=3, rng=make_rng("pts1"))
    fg = {(x, y) for x, y in pts.foreground()}
    bg = {(x, y) for x, y in pts.background()}
    assert fg == {(3, 2), (2, 2), (1, 2)}  # values 12, 11, 10
    assert bg == {(0, 0), (1, 0), (2, 0)}  # values 1, 2, 3


def test_sample_points_z1():
    act = np.array([[0.5, 0.1], [0.9, 0.4]])
    pts = wss.sample_points(act, z=1, rng=make_rng("pts2"))
    assert pts.foreground() == [(0, 1)]
    assert pts.background() == [(1, 0)]


def test_sample_points_matches_sort_oracle():
    rng = make_rng("pts3")
    act = rng.random((9, 11))  # distinct with probability 1
    pts = wss.sample_points(act, z=10, rng=make_rng("pts3b"))
    order = np.argsort(act.ravel())
    h, w = act.shape
    expected_bg = {(int(i % w), int(i // w)) for i in order[:10]}
    expected_fg = {(int(i % w), int(i // w)) for i in order[-10:]}
    assert set(pts.foreground()) == expected_fg
    assert set(pts.background()) == expected_bg


def test_sample_points_disjoint_and_inside():
    rng = make_rng("pts4")
    act = rng.random((6, 7))
    pts = wss.sample_points(act, z=21, rng=make_rng("pts4b"))
    fg, bg = set(pts.foreground()), set(pts.background())
    assert len(fg) == 21 and len(bg) == 21
    assert not (fg & bg)
    for x, y in fg | bg:
        assert 0 <= x < 7 and 0 <= y < 6


def test_sample_points_errors():
    with pytest.raises(wss.PatchTooSmallError):
        wss.sample_points(np.ones((2, 2)), z=3, rng=make_rng("pts5"))
    with pytest.raises(wss.UninformativeActivationError):
        wss.sample_points(np.full((5, 5), 0.7), z=2, rng=make_rng("pts6"))


def separable_patch(size=24):
    """Bright blob on dark ground, with matching point labels."""
    data = np.full((size, size, 3), 0.1)
    data[6:18, 6:18] = 0.9
    img = ImageGrid(data)
    act = data[:, :, 0]
    pts = wss.sample_points(act, z=10, rng=make_rng("sep"))
    return img, pts


def test_zero_lr_returns_initialization_output():
    img, pts = separable_patch()
    a = wss.train_patch_segmenter(img, pts, TrainSchedule(50, 0.0), rng=make_rng("init-a"))
    b = wss.train_patch_segmenter(img, pts, TrainSchedule(0, 0.25), rng=make_rng("init-a"))
    assert np.array_equal(a.probabilities, b.probabilities)


def test_separable_patch_converges_at_paper_schedule():
    img, pts = separable_patch()
    seg = wss.train_patch_segmenter(img, pts, TrainSchedule(500, 0.25), rng=make_rng("conv"))
    for x, y, lab in pts.points:
        assert (seg.probabilities[y, x] >= 0.5) == bool(lab)
    assert wss.point_loss(seg.probabilities, pts) <= 0.01


def test_square_object_mask_quality():
    rng = make_rng("sq")
    data = np.clip(0.15 + 0.02 * rng.normal(size=(28, 28, 3)), 0, 1)
    data[7:21, 7:21] = [0.85, 0.2, 0.2]
    img = ImageGrid(data)
    gt = np.zeros((28, 28), dtype=bool)
    gt[7:21, 7:21] = True
    act = gt.astype(float)  # guidance equals the exact ground truth
    tie = 0.001 * make_rng("sq-tie").random((28, 28))
    pts = wss.sample_points(act + tie, z=10, rng=make_rng("sq-pts"))
    seg = wss.train_patch_segmenter(img, pts, TrainSchedule(500, 0.25), rng=make_rng("sq-train"))
    inter = np.logical_and(seg.mask.bits, gt).sum()
    union = np.logical_or(seg.mask.bits, gt).sum()
    assert inter / union >= 0.9


def test_same_seed_bitwise_identical():
    img, pts = separable_patch()
    a = wss.train_patch_segmenter(img, pts, TrainSchedule(60, 0.25), seed=5)
    b = wss.train_patch_segmenter(img, pts, TrainSchedule(60, 0.25), seed=5)
    assert np.array_equal(a.probabilities, b.probabilities)
    assert np.array_equal(a.mask.bits, b.mask.bits)


def test_point_gradient_matches_finite_differences():
    img, pts = separable_patch(size=12)
    params = wss.init_segmenter(make_rng("fd-init"))
    x = img.data.transpose(2, 0, 1)
    probs, cache = wss.segmenter_forward(params, x)
    grads = wss._point_loss_grads(params, probs, cache, pts)
    eps = 1e-6
    worst = 0.0
    for name in ("w1", "w2", "w3", "b1", "b3"):
        arr = getattr(params, name)
        for fi in (0, arr.size - 1):
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + eps
            up = wss.point_loss(wss.segmenter_forward(params, x)[0], pts)
            arr[idx] = orig - eps
            dn = wss.point_loss(wss.segmenter_forward(params, x)[0], pts)
            arr[idx] = orig
            fd = (up - dn) / (2 * eps)
            if abs(fd) > 1e-9:
                worst = max(worst, abs(grads[name][idx] - fd) / max(abs(fd), 1e-9))
    assert worst < 1e-3


def test_point_outside_patch_rejected():
    img, _ = separable_patch(size=8)
    bad = wss.PointLabels(points=((9, 0, 1),), z=1)
    with pytest.raises(ValueError):
        wss.train_patch_segmenter(img, bad, TrainSchedule(1, 0.1))


def pseudo_box(x=4.0, y=6.0, w=8.0, h=5.0, cid=2):
    return PseudoBox(box=BBox(x, y, w, h), category_id=cid, score=1.5, provenance={"G": 3})


def seg_all(value, h=5, w=8):
    probs = np.full((h, w), 0.9 if value else 0.1)
    return wss.SegPatch(probabilities=probs, mask=BinaryMask(probs >= 0.5))


def test_assemble_all_ones_fills_box_extent():
    ann = wss.assemble_pseudo_annotation(pseudo_box(), seg_all(True), image_width=20, image_height=20)
    expected = np.zeros((20, 20), dtype=bool)
    expected[6:11, 4:12] = True
    assert np.array_equal(ann.mask.bits, expected)
    assert not ann.degenerate
    assert ann.mask.bits.sum() == 40


def test_assemble_all_zeros_flagged_degenerate():
    ann = wss.assemble_pseudo_annotation(pseudo_box(), seg_all(False), image_width=20, image_height=20)
    assert ann.degenerate
    assert not ann.mask.bits.any()


def test_assemble_rejects_mismatched_patch():
    with pytest.raises(ValueError):
        wss.assemble_pseudo_annotation(pseudo_box(w=9.0), seg_all(True), 20, 20)


def test_mask_stays_inside_box_footprint():
    rng = make_rng("footprint")
    img = ImageGrid(rng.random((14, 14, 3)))
    act = rng.random((10, 9))
    pts = wss.sample_points(act, z=5, rng=make_rng("fp-pts"))
    patch = ImageGrid(img.data[2:12, 3:12])
    seg = wss.train_patch_segmenter(patch, pts, TrainSchedule(30, 0.25), seed=1)
    pb = PseudoBox(box=BBox(3.0, 2.0, 9.0, 10.0), category_id=1, score=0.0, provenance={})
    ann = wss.assemble_pseudo_annotation(pb, seg, 14, 14)
    outside = ann.mask.bits.copy()
    outside[2:12, 3:12] = False
    assert not outside.any()


def test_annotation_json_round_trip_bit_exact(tmp_path):
    ann = wss.assemble_pseudo_annotation(pseudo_box(), seg_all(True), 20, 20)
    table = CategoryTable((Category(2, "red-disc", "base"),))
    record = make_annotation(1, 0, ann.category_id, ann.box, ann.mask, score=ann.score)
    from pseudomask.annotations import ImageInfo

    write_annotations(tmp_path / "a.json", [ImageInfo(0, "x.ppm", 20, 20)], table, [record])
    _, _, back = read_annotations(tmp_path / "a.json")
    assert np.array_equal(back[0].mask().bits, ann.mask.bits)
    assert back[0].bbox == ann.box
    assert back[0].score == ann.score
