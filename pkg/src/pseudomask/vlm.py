"""Minimal multi-modal encoder with verifiable attention-map math.

A stack of M single-head cross-attention layers runs one text-token query
against N_R region features; a linear head on the final hidden state yields
the image-caption similarity score. Activation maps weight a layer's
attention row by the clamped analytic gradient of that score, and the
gradient is hand-derived so it can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actmap import ActivationMap
from .containers import read_array_blob, write_array_blob

TVLM_MAGIC = b"TVLM"
TVLM_VERSION = 1

START_TOKEN = 0
END_TOKEN = 1
FIRST_CATEGORY_TOKEN = 2


class VlmShapeError(ValueError):
    """Inconsistent dimensions between params, features, and text."""


@dataclass(frozen=True)
class FeatureGrid:
    """Region features laid out on an h_f x w_f grid, one d-vector per cell."""

    h_f: int
    w_f: int
    R: np.ndarray
    downsample_factor: int = 16

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        if R.ndim != 2 or R.shape[0] != self.h_f * self.w_f:
            raise VlmShapeError(f"R must be ({self.h_f * self.w_f}, d), got {R.shape}")
        if not np.isfinite(R).all():
            raise VlmShapeError("region features must be finite")
        object.__setattr__(self, "R", R)
        self.R.setflags(write=False)

    @property
    def n_regions(self) -> int:
        return self.R.shape[0]

    @property
    def d(self) -> int:
        return self.R.shape[1]


@dataclass(frozen=True)
class TextSeq:
    """Token sequence with embeddings; one token is the object of interest."""

    tokens: tuple[int, ...]
    T: np.ndarray
    object_index: int

    def __post_init__(self):
        T = np.asarray(self.T, dtype=np.float64)
        if T.ndim != 2 or T.shape[0] != len(self.tokens):
            raise VlmShapeError(f"T must be ({len(self.tokens)}, d), got {T.shape}")
        if not (0 <= self.object_index < len(self.tokens)):
            raise VlmShapeError(f"object_index {self.object_index} out of range")
        if not np.isfinite(T).all():
            raise VlmShapeError("text embeddings must be finite")
        object.__setattr__(self, "T", T)
        self.T.setflags(write=False)


@dataclass(frozen=True)
class VlmParams:
    """Per-layer query/key/value projections plus the similarity head.

    token_embeddings is the synthetic vocabulary table used to build text
    sequences (ids 0 and 1 are reserved start/end markers).
    """

    wq: np.ndarray  # (M, d, d)
    wk: np.ndarray  # (M, d, d)
    wv: np.ndarray  # (M, d, d)
    sim_w: np.ndarray  # (d,)
    sim_b: float
    token_embeddings: np.ndarray  # (V, d)

    def __post_init__(self):
        wq = np.asarray(self.wq, dtype=np.float64)
        wk = np.asarray(self.wk, dtype=np.float64)
        wv = np.asarray(self.wv, dtype=np.float64)
        sw = np.asarray(self.sim_w, dtype=np.float64)
        emb = np.asarray(self.token_embeddings, dtype=np.float64)
        d = wq.shape[-1]
        for name, a in (("wq", wq), ("wk", wk), ("wv", wv)):
            if a.ndim != 3 or a.shape[1:] != (d, d) or a.shape[0] != wq.shape[0]:
                raise VlmShapeError(f"{name} must be (M, {d}, {d}), got {a.shape}")
        if sw.shape != (d,):
            raise VlmShapeError(f"sim_w must be ({d},), got {sw.shape}")
        if emb.ndim != 2 or emb.shape[1] != d:
            raise VlmShapeError(f"token_embeddings must be (V, {d}), got {emb.shape}")
        for key, val in (("wq", wq), ("wk", wk), ("wv", wv), ("sim_w", sw), ("token_embeddings", emb)):
            object.__setattr__(self, key, val)
            val.setflags(write=False)

    @property
    def n_layers(self) -> int:
        return self.wq.shape[0]

    @property
    def d(self) -> int:
        return self.wq.shape[-1]

    @property
    def vocab_size(self) -> int:
        return self.token_embeddings.shape[0]


@dataclass(frozen=True)
class AttentionTrace:
    """Per-layer attention rows and hidden states plus the similarity score."""

    attention: tuple[np.ndarray, ...]  # one (N_R,) softmax row per layer
    hidden: tuple[np.ndarray, ...]  # one (d,) vector per layer
    similarity: float


def _softmax(z: np.ndarray) -> np.ndarray:
    ex = np.exp(z - z.max())
    return ex / ex.sum()


def text_seq(params: VlmParams, category_tokens: list[int], object_position: int) -> TextSeq:
    """Wrap category token ids with start/end markers and embed them."""
    tokens = (START_TOKEN, *category_tokens, END_TOKEN)
    for t in tokens:
        if not (0 <= t < params.vocab_size):
            raise VlmShapeError(f"token id {t} outside vocabulary of {params.vocab_size}")
    T = params.token_embeddings[list(tokens)]
    return TextSeq(tokens=tokens, T=T, object_index=object_position + 1)


def forward(params: VlmParams, img_features: FeatureGrid, text: TextSeq) -> AttentionTrace:
    """Run all M cross-attention layers for the object-of-interest token."""
    if img_features.d != params.d or text.T.shape[1] != params.d:
        raise VlmShapeError(
            f"dimension mismatch: params d={params.d}, features d={img_features.d}, text d={text.T.shape[1]}"
        )
    scale = np.sqrt(params.d)
    R = img_features.R
    h = text.T[text.object_index]
    attention = []
    hidden = []
    for n in range(params.n_layers):
        q = h @ params.wq[n]
        keys = R @ params.wk[n]
        vals = R @ params.wv[n]
        x = _softmax(q @ keys.T / scale)
        h = x @ vals
        attention.append(x)
        hidden.append(h)
    s = float(params.sim_w @ h + params.sim_b)
    return AttentionTrace(attention=tuple(attention), hidden=tuple(hidden), similarity=s)


def similarity_from_attention(
    params: VlmParams, img_features: FeatureGrid, x_m: np.ndarray, layer: int
) -> float:
    """Similarity as a function of the attention row at one layer.

    Continues the forward pass from an explicit attention row at ``layer``
    (1-based); this is the function whose gradient the activation map uses,
    and finite-differencing it checks the analytic gradient.
    """
    R = img_features.R
    scale = np.sqrt(params.d)
    h = x_m @ (R @ params.wv[layer - 1])
    for n in range(layer, params.n_layers):
        q = h @ params.wq[n]
        keys = R @ params.wk[n]
        vals = R @ params.wv[n]
        x = _softmax(q @ keys.T / scale)
        h = x @ vals
    return float(params.sim_w @ h + params.sim_b)


def attention_gradient(
    params: VlmParams, img_features: FeatureGrid, text: TextSeq, layer: int
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic d(similarity)/d(attention row) at ``layer`` (1-based).

    Returns (attention row, gradient). The gradient treats the row as the
    differentiation point and backpropagates through every later layer and
    the similarity head.
    """
    if not (1 <= layer <= params.n_layers):
        raise VlmShapeError(f"layer {layer} out of range 1..{params.n_layers}")
    trace = forward(params, img_features, text)
    R = img_features.R
    scale = np.sqrt(params.d)
    g_h = params.sim_w.copy()  # dS/dh at the current layer, walking backwards
    for n in range(params.n_layers - 1, layer - 1, -1):
        x = trace.attention[n]
        vals = R @ params.wv[n]
        keys = R @ params.wk[n]
        dx = vals @ g_h
        dz = x * (dx - float(dx @ x))  # softmax Jacobian-transpose product
        dq = dz @ keys / scale
        g_h = params.wq[n] @ dq
    vals_m = R @ params.wv[layer - 1]
    grad = vals_m @ g_h
    return trace.attention[layer - 1], grad


def gradcam(
    params: VlmParams,
    img_features: FeatureGrid,
    text: TextSeq,
    layer: int,
    category_id: int = -1,
    iteration: int = 0,
) -> ActivationMap:
    """Attention row weighted by the clamped similarity gradient (>= 0)."""
    x, grad = attention_gradient(params, img_features, text, layer)
    phi = x * np.maximum(grad, 0.0)
    grid = phi.reshape(img_features.h_f, img_features.w_f)
    return ActivationMap(values=grid, category_id=category_id, iteration=iteration)


def save_params(params: VlmParams, path) -> None:
    write_array_blob(
        path,
        TVLM_MAGIC,
        TVLM_VERSION,
        [params.n_layers, params.d, params.vocab_size],
        [params.wq, params.wk, params.wv, params.sim_w, np.array([params.sim_b]), params.token_embeddings],
    )


def load_params(path) -> VlmParams:
    meta, arrays = read_array_blob(path, TVLM_MAGIC, TVLM_VERSION)
    if len(meta) != 3 or len(arrays) != 6:
        raise VlmShapeError("malformed TVLM payload")
    wq, wk, wv, sim_w, sim_b, emb = arrays
    return VlmParams(wq=wq, wk=wk, wv=wv, sim_w=sim_w, sim_b=float(sim_b[0]), token_embeddings=emb)


def _f32(a: np.ndarray) -> np.ndarray:
    # keep parameters exactly representable in the f32 container payload
    return a.astype(np.float32).astype(np.float64)


def make_random_params(rng: np.random.Generator, n_layers: int = 2, d: int = 16, vocab_size: int = 12) -> VlmParams:
    """Gaussian parameters for math tests; values are f32-representable."""
    return VlmParams(
        wq=_f32(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_layers, d, d))),
        wk=_f32(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_layers, d, d))),
        wv=_f32(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_layers, d, d))),
        sim_w=_f32(rng.normal(0.0, 1.0, size=d)),
        sim_b=float(np.float32(rng.normal())),
        token_embeddings=_f32(rng.normal(0.0, 1.0, size=(vocab_size, d))),
    )


def make_aligned_params(
    rng: np.random.Generator, n_layers: int = 2, d: int = 16, n_categories: int = 9
) -> VlmParams:
    """Frozen stand-in for a pretrained encoder over the synthetic vocabulary.

    Projections are identity, so attention reduces to the plain scaled
    dot-product form. Every category embedding shares a positive component
    along the similarity direction, which makes the similarity gradient
    positive on cells whose features align with the queried category.
    """
    eye = np.broadcast_to(np.eye(d), (n_layers, d, d)).copy()
    sim_w = np.zeros(d)
    sim_w[0] = 1.0
    vocab = FIRST_CATEGORY_TOKEN + n_categories
    emb = np.zeros((vocab, d))
    for t in range(vocab):
        u = rng.normal(size=d)
        u[0] = 0.0
        u /= np.linalg.norm(u)
        emb[t] = 0.6 * sim_w + 0.8 * u
    return VlmParams(
        wq=_f32(eye), wk=_f32(eye), wv=_f32(eye), sim_w=_f32(sim_w), sim_b=0.0, token_embeddings=_f32(emb)
    )


def category_token(category_index: int) -> int:
    """Vocabulary id of the category at a zero-based index."""
    return FIRST_CATEGORY_TOKEN + category_index
