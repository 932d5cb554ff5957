import numpy as np
import pytest

from pseudomask import ovclassify as ov
from pseudomask.config import TrainSchedule

from conftest import make_rng


def space_with_dots(class_dots, bg_dot=0.0):
    """1-d space engineered so logits equal the requested dot products."""
    n = len(class_dots)
    return ov.EmbeddingSpace(
        class_ids=tuple(range(1, n + 1)),
        class_embeddings=np.array([[float(v)] for v in class_dots]),
        bg=np.array([float(bg_dot)]),
        head=np.array([[1.0]]),
    )


def test_all_zero_embeddings_uniform():
    space = ov.EmbeddingSpace(
        class_ids=(1, 2, 3),
        class_embeddings=np.zeros((3, 4)),
        bg=np.zeros(4),
        head=np.zeros((5, 4)),
    )
    probs = ov.region_class_probs(space, np.ones(5))
    assert np.allclose(probs, 0.25)


def test_saturated_class_dominates():
    space = space_with_dots([50.0, 0.0, 0.0])
    probs = ov.region_class_probs(space, np.array([1.0]))
    assert probs[1] > 0.999999


def test_hand_case_matches_closed_form_softmax():
    space = space_with_dots([1.0, 2.0, 3.0], bg_dot=0.0)
    probs = ov.region_class_probs(space, np.array([1.0]))
    z = np.array([0.0, 1.0, 2.0, 3.0])
    expected = np.exp(z) / np.exp(z).sum()
    assert np.allclose(probs, expected, atol=1e-12)


def test_normalization_with_extreme_dots():
    rng = make_rng("ov/extreme")
    for _ in range(200):
        n = int(rng.integers(1, 6))
        space = space_with_dots(rng.uniform(-700, 700, size=n), bg_dot=float(rng.uniform(-700, 700)))
        probs = ov.region_class_probs(space, np.array([1.0]))
        assert np.isfinite(probs).all()
        assert abs(probs.sum() - 1.0) < 1e-6


def test_classify_singleton_vocabulary():
    space = space_with_dots([2.0, -1.0], bg_dot=0.5)
    assert ov.classify_region(space, np.array([1.0]), [1]) == 1


def test_classify_background_can_win():
    space = space_with_dots([-5.0], bg_dot=10.0)
    assert ov.classify_region(space, np.array([1.0]), [1]) == ov.BG_CATEGORY_ID


def test_classify_restricted_vocabulary():
    space = space_with_dots([5.0, 9.0, 7.0])
    assert ov.classify_region(space, np.array([1.0]), [1, 3]) == 3


def test_classify_matches_brute_force_oracle():
    rng = make_rng("ov/oracle")
    for _ in range(100):
        n = int(rng.integers(1, 7))
        dots = rng.normal(size=n) * 3
        bg = float(rng.normal() * 3)
        space = space_with_dots(dots, bg_dot=bg)
        vocab = sorted(rng.choice(np.arange(1, n + 1), size=int(rng.integers(1, n + 1)), replace=False).tolist())
        got = ov.classify_region(space, np.array([1.0]), vocab, bg_weight=0.2)
        cand = [(bg * 0.2, ov.BG_CATEGORY_ID)] + [(dots[cid - 1], cid) for cid in vocab]
        best = max(range(len(cand)), key=lambda i: cand[i][0])
        assert got == cand[best][1]


def test_rescaling_space_keeps_argmax():
    rng = make_rng("ov/scale")
    for _ in range(50):
        n = int(rng.integers(1, 6))
        emb = rng.normal(size=(n, 4))
        bg = rng.normal(size=4)
        head = rng.normal(size=(3, 4))
        region = rng.normal(size=3)
        vocab = list(range(1, n + 1))
        scale = float(rng.uniform(0.05, 40.0))
        a = ov.classify_region(
            ov.EmbeddingSpace(tuple(vocab), emb, bg, head), region, vocab
        )
        b = ov.classify_region(
            ov.EmbeddingSpace(tuple(vocab), emb * scale, bg * scale, head), region, vocab
        )
        assert a == b


def test_classify_empty_vocab_rejected():
    with pytest.raises(ValueError):
        ov.classify_region(space_with_dots([1.0]), np.array([1.0]), [])


def test_prompt_templates_load():
    templates = ov.load_prompt_templates()
    assert len(templates) == 63
    assert all(t.count("{}") == 1 for t in templates)
    assert "A photo of {} in the scene." in templates
    assert "A black and white photo of the {}." in templates


def test_pseudo_caption_paper_example():
    caption = ov.pseudo_caption(
        ["zebra", "giraffe"], make_rng("cap"), templates=["A photo of {} in the scene."]
    )
    assert caption == "A photo of zebra and giraffe in the scene."


def test_pseudo_caption_single_label_has_no_and():
    caption = ov.pseudo_caption(["zebra"], make_rng("cap1"))
    assert " and " not in caption
    assert "zebra" in caption


def test_pseudo_caption_deterministic_and_errors():
    a = ov.pseudo_caption(["cat", "dog"], make_rng("cap2"))
    b = ov.pseudo_caption(["cat", "dog"], make_rng("cap2"))
    assert a == b
    with pytest.raises(ValueError):
        ov.pseudo_caption([], make_rng("cap3"))


def test_all_63_templates_appear_in_1000_samples():
    templates = ov.load_prompt_templates()
    rng = make_rng("coupon")
    seen = set()
    for _ in range(1000):
        seen.add(ov.pseudo_caption(["x"], rng, templates=templates))
    assert len(seen) == 63


def test_embedding_head_training_separates_classes():
    rng = make_rng("embed")
    n_classes, d_region, d = 3, 6, 5
    emb = rng.normal(size=(n_classes, d))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    space = ov.init_space((1, 2, 3), emb, d_region, rng)
    centers = rng.normal(size=(n_classes + 1, d_region)) * 2.0
    feats, labels = [], []
    for i in range(240):
        y = i % (n_classes + 1)
        feats.append(centers[y] + 0.1 * rng.normal(size=d_region))
        labels.append(y)
    feats = np.stack(feats)
    labels = np.array(labels)
    result = ov.train_embedding_head(feats, labels, space, TrainSchedule(400, 0.5))
    assert result.loss_curve[-1] < result.loss_curve[0] * 0.2
    preds = [int(np.argmax(ov.region_class_probs(result.space, f))) for f in feats]
    accuracy = float(np.mean(np.array(preds) == labels))
    assert accuracy > 0.95


def test_embedding_head_loss_mode_weights_background():
    rng = make_rng("embed-w")
    emb = rng.normal(size=(2, 4))
    space = ov.init_space((1, 2), emb, 3, rng)
    feats = rng.normal(size=(10, 3))
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0])
    a = ov.train_embedding_head(feats, labels, space, TrainSchedule(5, 0.1), bg_weight_mode="loss")
    b = ov.train_embedding_head(feats, labels, space, TrainSchedule(5, 0.1), bg_weight_mode="logit")
    assert not np.allclose(a.space.head, b.space.head)


def test_cemb_export_ingest_round_trip(tmp_path):
    rng = make_rng("cemb-rt")
    emb = rng.normal(size=(4, 8)).astype(np.float32).astype(np.float64)
    space = ov.EmbeddingSpace((2, 4, 6, 8), emb, np.zeros(8), np.eye(8))
    ov.export_space(space, tmp_path / "c.cemb")
    back = ov.space_from_cemb(tmp_path / "c.cemb", d_region=8, rng=make_rng("cemb-rt2"))
    assert back.class_ids == (2, 4, 6, 8)
    assert np.array_equal(back.class_embeddings, emb)


def test_cemb_duplicate_ids_rejected(tmp_path):
    from pseudomask.containers import write_cemb

    write_cemb(tmp_path / "dup.cemb", [(1, np.ones(3)), (1, np.ones(3))])
    with pytest.raises(ValueError, match="duplicate"):
        ov.space_from_cemb(tmp_path / "dup.cemb", 3, make_rng("dup"))
