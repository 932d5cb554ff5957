"""Open-vocabulary region classification and pseudo-caption construction.

A linear head maps region features into the text-embedding space; softmax
over dot products against a background vector plus every class embedding
gives region probabilities. Captions for label-only images are built by
substituting the joined label list into one of 63 prompt templates.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .config import TrainSchedule
from .containers import read_cemb, write_cemb

BG_CATEGORY_ID = -1


@dataclass(frozen=True)
class EmbeddingSpace:
    """Class/background embeddings plus the learnable region head."""

    class_ids: tuple[int, ...]
    class_embeddings: np.ndarray  # (N_C, d)
    bg: np.ndarray  # (d,)
    head: np.ndarray  # (d_r, d) linear map from region features

    def __post_init__(self):
        emb = np.asarray(self.class_embeddings, dtype=np.float64)
        bg = np.asarray(self.bg, dtype=np.float64)
        head = np.asarray(self.head, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(self.class_ids):
            raise ValueError(f"class_embeddings must be ({len(self.class_ids)}, d), got {emb.shape}")
        if bg.shape != (emb.shape[1],) or head.shape[1] != emb.shape[1]:
            raise ValueError("background/head dims inconsistent with class embeddings")
        if not (np.isfinite(emb).all() and np.isfinite(bg).all() and np.isfinite(head).all()):
            raise ValueError("embeddings must be finite")
        object.__setattr__(self, "class_embeddings", emb)
        object.__setattr__(self, "bg", bg)
        object.__setattr__(self, "head", head)

    @property
    def d(self) -> int:
        return self.class_embeddings.shape[1]


def init_space(class_ids: tuple[int, ...], class_embeddings: np.ndarray, d_region: int, rng: np.random.Generator) -> EmbeddingSpace:
    """Fresh space: given class embeddings, zero background, random head."""
    d = np.asarray(class_embeddings).shape[1]
    return EmbeddingSpace(
        class_ids=tuple(class_ids),
        class_embeddings=class_embeddings,
        bg=np.zeros(d),
        head=rng.normal(0.0, 1.0 / np.sqrt(d_region), size=(d_region, d)),
    )


def _logits(space: EmbeddingSpace, region: np.ndarray) -> np.ndarray:
    """Dot products [bg, c_1 .. c_N] for one region feature vector."""
    h = np.asarray(region, dtype=np.float64) @ space.head
    return np.concatenate(([h @ space.bg], space.class_embeddings @ h))


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def region_class_probs(space: EmbeddingSpace, region: np.ndarray) -> np.ndarray:
    """Probabilities over {background} + classes; index 0 is background."""
    return _stable_softmax(_logits(space, region))


def classify_region(
    space: EmbeddingSpace,
    region: np.ndarray,
    vocabulary: tuple[int, ...] | list[int],
    bg_weight: float = 0.2,
    bg_weight_mode: str = "logit",
) -> int:
    """Argmax over a restricted vocabulary; background may win.

    The background logit is down-weighted multiplicatively (mode "logit",
    the default, which keeps the argmax invariant under positive rescaling
    of the space) or shifted additively by log(bg_weight) (mode "offset").
    Returns BG_CATEGORY_ID when the background wins.
    """
    if not vocabulary:
        raise ValueError("vocabulary subset must be nonempty")
    index = {cid: i for i, cid in enumerate(space.class_ids)}
    cols = [index[cid] for cid in vocabulary]
    logits = _logits(space, region)
    if bg_weight_mode == "logit":
        bg_logit = logits[0] * bg_weight
    elif bg_weight_mode == "offset":
        bg_logit = logits[0] + np.log(bg_weight)
    else:
        raise ValueError(f"unknown bg_weight_mode {bg_weight_mode!r}")
    restricted = np.concatenate(([bg_logit], logits[1:][cols]))
    win = int(np.argmax(restricted))
    return BG_CATEGORY_ID if win == 0 else int(vocabulary[win - 1])


# ---------------------------------------------------------------------------
# pseudo-captions


def load_prompt_templates() -> list[str]:
    """The 63 caption templates; each has exactly one {} slot."""
    text = resources.files("pseudomask").joinpath("data/prompt_templates.txt").read_text("utf-8")
    templates = [line for line in text.splitlines() if line.strip()]
    for i, t in enumerate(templates):
        if t.count("{}") != 1:
            raise ValueError(f"template {i} must contain exactly one {{}} slot: {t!r}")
    if len(templates) != 63:
        raise ValueError(f"expected 63 templates, found {len(templates)}")
    return templates


def pseudo_caption(labels: list[str], rng: np.random.Generator, templates: list[str] | None = None) -> str:
    """Sample a template and substitute the " and "-joined label list."""
    if not labels:
        raise ValueError("need at least one label to build a caption")
    if templates is None:
        templates = load_prompt_templates()
    template = templates[int(rng.integers(len(templates)))]
    return template.replace("{}", " and ".join(labels))


# ---------------------------------------------------------------------------
# toy embedding-head trainer (pull/push cross-entropy over region features)


@dataclass(frozen=True)
class EmbedTrainResult:
    space: EmbeddingSpace
    loss_curve: np.ndarray


def train_embedding_head(
    features: np.ndarray,
    labels: np.ndarray,
    space: EmbeddingSpace,
    schedule: TrainSchedule,
    bg_weight: float = 0.2,
    bg_weight_mode: str = "logit",
) -> EmbedTrainResult:
    """Full-batch gradient descent on cross-entropy over {bg} + classes.

    ``labels`` holds 0 for background regions and 1 + class index for the
    rest. In mode "loss" the background rows' loss terms are scaled by
    bg_weight (the alternative reading of the background weight).
    """
    feats = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = feats.shape[0]
    head = space.head.copy()
    bg = space.bg.copy()
    emb = space.class_embeddings
    weights = np.ones(n)
    if bg_weight_mode == "loss":
        weights = np.where(y == 0, bg_weight, 1.0)
    weights = weights / weights.sum()

    losses = np.zeros(schedule.iters)
    for it in range(schedule.iters):
        h = feats @ head  # (n, d)
        logits = np.concatenate([h @ bg[:, None], h @ emb.T], axis=1)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        losses[it] = float(-(weights * np.log(np.maximum(probs[np.arange(n), y], 1e-300))).sum())
        dlogits = probs.copy()
        dlogits[np.arange(n), y] -= 1.0
        dlogits *= weights[:, None]
        dh = dlogits[:, :1] * bg[None, :] + dlogits[:, 1:] @ emb
        dhead = feats.T @ dh
        dbg = (dlogits[:, 0][:, None] * h).sum(axis=0)
        if schedule.weight_decay:
            dhead = dhead + schedule.weight_decay * head
        head -= schedule.lr * dhead
        bg -= schedule.lr * dbg
    trained = EmbeddingSpace(space.class_ids, emb, bg, head)
    return EmbedTrainResult(space=trained, loss_curve=losses)


def export_space(space: EmbeddingSpace, path) -> None:
    write_cemb(path, [(cid, space.class_embeddings[i]) for i, cid in enumerate(space.class_ids)])


def space_from_cemb(path, d_region: int, rng: np.random.Generator) -> EmbeddingSpace:
    entries = read_cemb(path)
    ids = tuple(cid for cid, _ in entries)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate category ids in embedding container")
    emb = np.stack([vec for _, vec in entries])
    return init_space(ids, emb, d_region, rng)
