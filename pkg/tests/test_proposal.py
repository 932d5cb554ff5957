import numpy as np
import pytest

from pseudomask import proposal as pr
from pseudomask.config import Category, CategoryTable, TrainSchedule
from pseudomask.geometry import BBox, encode_deltas, iou
from pseudomask.raster import ImageGrid
from pseudomask.synthdata import default_category_table, generate_dataset, generate_scene

from conftest import make_rng


def uniform_image(size=64, value=0.5):
    return ImageGrid(np.full((size, size, 3), value))


def square_image(size=64):
    data = np.full((size, size, 3), 0.2)
    data[20:40, 24:44] = [0.9, 0.1, 0.1]
    return ImageGrid(data), BBox(24.0, 20.0, 20.0, 20.0)


def test_blank_image_yields_grid_windows_only():
    img = uniform_image()
    props = pr.unsupervised_proposals(img, seed=0)
    grid_only = pr._grid_windows(img.width, img.height)
    assert len(props.boxes) == len(pr._dedup(grid_only))


def test_solid_square_recovered():
    img, gt = square_image()
    props = pr.unsupervised_proposals(img, seed=0)
    assert max(iou(b, gt) for b in props.boxes) >= 0.7


def test_dedup_postcondition():
    img, _ = square_image()
    boxes = pr.unsupervised_proposals(img, seed=3).boxes
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            assert iou(boxes[i], boxes[j]) < 0.95


def test_proposals_deterministic_and_clipped():
    scene = generate_scene(default_category_table(), make_rng("props"), image_size=96)
    a = pr.unsupervised_proposals(scene.image, seed=5)
    b = pr.unsupervised_proposals(scene.image, seed=5)
    assert a.boxes == b.boxes
    for box in a.boxes:
        assert box.x >= 0 and box.y >= 0
        assert box.x2 <= 96 and box.y2 <= 96


def fresh_model(n_classes=4, seed=0, zero_heads=False):
    model = pr.init_wspn(n_classes, make_rng(f"wspn-init/{seed}"))
    if zero_heads:
        model.w_cls[:] = 0.0
        model.b_cls[:] = 0.0
        model.w_det[:] = 0.0
        model.b_det[:] = 0.0
    return model


def test_single_proposal_scores():
    model = fresh_model(n_classes=3)
    feats = make_rng("score1").normal(size=(1, pr.FEATURE_DIM))
    s = pr.wspn_score_features(model, feats)
    assert np.allclose(s.sigma_det, 1.0)
    assert np.allclose(s.p, s.sigma_cls[:, 0])


def test_zeroed_heads_give_uniform_softmaxes():
    model = fresh_model(n_classes=5, zero_heads=True)
    feats = make_rng("score0").normal(size=(7, pr.FEATURE_DIM))
    s = pr.wspn_score_features(model, feats)
    assert np.allclose(s.sigma_cls, 1.0 / 5.0)
    assert np.allclose(s.sigma_det, 1.0 / 7.0)
    assert np.allclose(s.p, 1.0 / 5.0)


def test_score_invariants_over_100_random_models():
    for seed in range(100):
        rng = make_rng(f"sweep/{seed}")
        model = pr.init_wspn(4, rng)
        n = int(rng.integers(1, 30))
        feats = rng.normal(size=(n, pr.FEATURE_DIM))
        s = pr.wspn_score_features(model, feats)
        assert np.allclose(s.sigma_cls.sum(axis=0), 1.0, atol=1e-9)
        assert np.allclose(s.sigma_det.sum(axis=1), 1.0, atol=1e-9)
        assert (s.p >= 0.0).all() and (s.p <= 1.0).all()


def scores_with_p(p, n=1):
    """Hand-built scores object for loss tests."""
    c = len(p)
    return pr.WspnScores(
        w_cls=np.zeros((c, n)), w_det=np.zeros((c, n)),
        sigma_cls=np.zeros((c, n)), sigma_det=np.zeros((c, n)),
        w_c=np.zeros((c, n)), p=np.array(p, dtype=float),
        pred_deltas=np.zeros((n, 4)), hidden=np.zeros((n, 8)),
    )


def no_targets(n=1):
    return pr.RegressionTargets(assigned=np.zeros(n, dtype=bool), target_deltas=np.zeros((n, 4)))


def test_bce_zero_when_p_matches_labels():
    s = scores_with_p([1.0, 0.0])
    loss = pr.wspn_loss(s, np.array([1.0, 0.0]), _props(1), no_targets())
    assert abs(loss) < 1e-5


def test_bce_hand_case_ln2():
    s = scores_with_p([0.5])
    loss = pr.wspn_loss(s, np.array([1.0]), _props(1), no_targets())
    assert loss == pytest.approx(np.log(2.0), abs=1e-12)


def _props(n, seed=0):
    rng = make_rng(f"propgen/{seed}")
    boxes = [
        BBox(float(rng.uniform(0, 40)), float(rng.uniform(0, 40)), float(rng.uniform(4, 20)), float(rng.uniform(4, 20)))
        for _ in range(n)
    ]
    return pr.ProposalSet(boxes=tuple(boxes), source="unsupervised")


def test_reg_term_zero_at_zero_init_with_self_targets():
    # fresh model: regression head is zero-initialized -> identity deltas
    model = fresh_model(n_classes=2)
    feats = make_rng("reg0").normal(size=(3, pr.FEATURE_DIM))
    scores = pr.wspn_score_features(model, feats)
    props = _props(3)
    targets = pr.RegressionTargets(
        assigned=np.ones(3, dtype=bool),
        target_deltas=np.stack([encode_deltas(b, b) for b in props.boxes]),
    )
    loss_with = pr.wspn_loss(scores, np.array([1.0, 0.0]), props, targets)
    loss_without = pr.wspn_loss(scores, np.array([1.0, 0.0]), props, no_targets(3))
    assert loss_with == pytest.approx(loss_without, abs=1e-12)


def test_pseudo_targets_single_proposal():
    model = fresh_model(n_classes=1)
    feats = make_rng("tgt1").normal(size=(1, pr.FEATURE_DIM))
    scores = pr.wspn_score_features(model, feats)
    props = _props(1)
    t = pr.make_pseudo_regression_targets(scores, props, np.array([1.0]))
    assert t.assigned.all()
    assert np.allclose(t.target_deltas[0], 0.0)


def test_pseudo_targets_disjoint_proposals():
    props = pr.ProposalSet(boxes=(BBox(0, 0, 5, 5), BBox(30, 30, 5, 5)), source="unsupervised")
    model = fresh_model(n_classes=1)
    feats = make_rng("tgt2").normal(size=(2, pr.FEATURE_DIM))
    scores = pr.wspn_score_features(model, feats)
    t = pr.make_pseudo_regression_targets(scores, props, np.array([1.0]))
    seed_idx = int(np.argmax(scores.w_c[0]))
    assert t.assigned[seed_idx]
    assert t.assigned.sum() == 1


def test_pseudo_targets_match_brute_force():
    rng = make_rng("tgt-brute")
    props = _props(5, seed=4)
    model = fresh_model(n_classes=3, seed=2)
    feats = rng.normal(size=(5, pr.FEATURE_DIM))
    scores = pr.wspn_score_features(model, feats)
    labels = np.array([1.0, 0.0, 1.0])
    t = pr.make_pseudo_regression_targets(scores, props, labels)

    expect_assigned = np.zeros(5, dtype=bool)
    expect_deltas = np.zeros((5, 4))
    for c in (0, 2):
        seed_idx = max(range(5), key=lambda i: scores.w_c[c, i])
        for i in range(5):
            if iou(props.boxes[i], props.boxes[seed_idx]) >= 0.5:
                expect_assigned[i] = True
                expect_deltas[i] = encode_deltas(props.boxes[i], props.boxes[seed_idx])
    assert np.array_equal(t.assigned, expect_assigned)
    assert np.allclose(t.target_deltas, expect_deltas)


def test_loss_gradient_matches_finite_differences():
    rng = make_rng("gradcheck")
    model = fresh_model(n_classes=3, seed=7)
    n = 6
    feats = rng.normal(size=(n, pr.FEATURE_DIM))
    labels = np.array([1.0, 0.0, 1.0])
    props = _props(n, seed=9)
    scores = pr.wspn_score_features(model, feats)
    targets = pr.make_pseudo_regression_targets(scores, props, labels)
    grads = pr.wspn_gradients(model, feats, labels, targets)
    eps = 1e-6
    worst = 0.0
    for name in ("w1", "w_cls", "w_det", "w_reg", "b1"):
        arr = model.params()[name]
        flat_idx = [0, arr.size // 2, arr.size - 1]
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + eps
            up = pr.wspn_loss_from_features(model, feats, labels, targets)
            arr[idx] = orig - eps
            dn = pr.wspn_loss_from_features(model, feats, labels, targets)
            arr[idx] = orig
            fd = (up - dn) / (2 * eps)
            if abs(fd) > 1e-9:
                worst = max(worst, abs(grads[name][idx] - fd) / max(abs(fd), 1e-9))
    assert worst < 1e-3


def tiny_table():
    return CategoryTable((Category(1, "red-disc", "base"), Category(2, "blue-square", "base")))


def table_for_scene(scene):
    """Base-only vocabulary restricted to the categories the scene shows."""
    names = {c.id: c.name for c in default_category_table()}
    return CategoryTable(tuple(Category(cid, names[cid], "base") for cid in sorted(scene.image_labels)))


def test_training_loss_decreases_on_one_image():
    scene = generate_scene(default_category_table(), make_rng("train1"), image_size=96, max_instances=1)
    res = pr.train_wspn(
        [(scene.image, scene.image_labels)], table_for_scene(scene), TrainSchedule(50, 0.01, 0.0), seed=0
    )
    assert all(res.loss_curve[i + 1] < res.loss_curve[i] for i in range(49))


def test_zero_lr_keeps_parameters():
    scene = generate_scene(default_category_table(), make_rng("train0"), image_size=96)
    table = table_for_scene(scene)
    res = pr.train_wspn([(scene.image, scene.image_labels)], table, TrainSchedule(5, 0.0, 0.0), seed=0)
    ref = pr.train_wspn([(scene.image, scene.image_labels)], table, TrainSchedule(0, 0.1, 0.0), seed=0)
    for name, arr in res.model.params().items():
        assert np.array_equal(arr, ref.model.params()[name])


def test_train_requires_base_coverage():
    scene = generate_scene(default_category_table(), make_rng("cover"), image_size=96)
    with pytest.raises(ValueError, match="never shows"):
        pr.train_wspn([(scene.image, scene.image_labels)], default_category_table(), TrainSchedule(5, 0.1), seed=0)
    with pytest.raises(ValueError, match="empty"):
        pr.train_wspn([], default_category_table(), TrainSchedule(5, 0.1), seed=0)


def test_two_class_image_score_auc():
    table = tiny_table()
    rng_names = [f"auc/{i}" for i in range(250)]
    scenes = [
        generate_scene(table, make_rng(n), image_size=80, max_instances=2, clutter=False)
        for n in rng_names
    ]
    train = [(s.image, s.image_labels) for s in scenes[:200]]
    held = scenes[200:]
    res = pr.train_wspn(train, table, TrainSchedule(3000, 0.003, 0.0001), seed=3)
    scores_present: dict[int, list] = {0: [], 1: []}
    scores_absent: dict[int, list] = {0: [], 1: []}
    for s in held:
        props = pr.unsupervised_proposals(s.image, seed=3)
        sc = pr.wspn_score_features(res.model, pr.proposal_features(s.image, props))
        for ci, cid in enumerate(res.model.class_ids):
            (scores_present if cid in s.image_labels else scores_absent)[ci].append(sc.p[ci])
    aucs = []
    for ci in (0, 1):
        pos, neg = scores_present[ci], scores_absent[ci]
        if not pos or not neg:
            continue
        wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
        aucs.append(wins / (len(pos) * len(neg)))
    assert aucs and min(aucs) > 0.9


def test_top_k_returns_all_when_k_large():
    scene = generate_scene(default_category_table(), make_rng("topk"), image_size=96)
    model = fresh_model(n_classes=6, seed=5)
    props = pr.unsupervised_proposals(scene.image, seed=0)
    out = pr.top_k_features(model, pr.proposal_features(scene.image, props), props, k=10_000)
    assert len(out) == len(props)
    assert out.source == "wspn"


def test_top_k_one_returns_highest_confidence():
    scene = generate_scene(default_category_table(), make_rng("topk1"), image_size=96)
    model = fresh_model(n_classes=6, seed=6)
    props = pr.unsupervised_proposals(scene.image, seed=0)
    feats = pr.proposal_features(scene.image, props)
    conf = pr.wspn_score_features(model, feats).sigma_det.max(axis=0)
    out = pr.top_k_features(model, feats, props, k=1)
    assert len(out) == 1
    assert out.scores[0] == conf.max()


def test_ranking_matches_brute_force_sort_oracle():
    rng = make_rng("rank-oracle")
    for _ in range(30):
        n = int(rng.integers(1, 40))
        conf = np.round(rng.random(n), 1)  # coarse values force ties
        areas = np.round(rng.uniform(1, 5, size=n), 1)
        k = int(rng.integers(1, n + 1))
        got = pr.ranked_indices(conf, areas, k)
        oracle = sorted(range(n), key=lambda i: (-conf[i], -areas[i], i))[:k]
        assert got == oracle
    with pytest.raises(ValueError):
        pr.ranked_indices(np.array([1.0]), np.array([1.0]), 0)


def test_checkpoint_round_trip(tmp_path):
    model = fresh_model(n_classes=3, seed=8)
    model.class_ids = (4, 7, 9)
    pr.save_wspn(model, tmp_path / "m.bin")
    back = pr.load_wspn(tmp_path / "m.bin")
    assert back.class_ids == (4, 7, 9)
    for name, arr in model.params().items():
        assert np.allclose(back.params()[name], arr, atol=1e-6)
    pr.save_wspn(back, tmp_path / "m2.bin")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()


def test_proposals_json(tmp_path):
    import json

    props = {1: pr.ProposalSet(boxes=(BBox(0, 0, 4, 4),), source="wspn", scores=np.array([0.5]))}
    pr.write_proposals_json(tmp_path / "p.json", props)
    doc = json.loads((tmp_path / "p.json").read_text())
    assert doc["1"][0]["bbox"] == [0.0, 0.0, 4.0, 4.0]
    assert doc["1"][0]["score"] == 0.5
