"""Confidence-based keyframe sampling.

Each pseudo-frame gets a confidence score: one minus the softmax of the
squared gap between its similarity to the before-image and to the
after-image. High confidence marks frames sitting halfway through the
change semantically. The top-k frames (ties to the earlier index) are
kept in temporal order and re-attached to the endpoints.

Similarity backends:
  * visual_only   - cosine over pixel-pool features (4x4 average pooling,
                    flattened, L2-normalized);
  * visual_text   - a pair-conditioned score against the change caption,
                    either the palette-based oracle scorer (synthetic data
                    only) or a small contrastively trained encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .synthdata import BACKGROUND, COLOR_NAMES, COLORS, Grammar, Slots


@dataclass
class SimilarityProfile:
    s_bef: np.ndarray
    s_aft: np.ndarray
    strategy: str   # visual_only | visual_text

    def __post_init__(self):
        self.s_bef = np.asarray(self.s_bef, dtype=np.float64)
        self.s_aft = np.asarray(self.s_aft, dtype=np.float64)
        if self.s_bef.shape != self.s_aft.shape or self.s_bef.ndim != 1:
            raise ConfigError("similarity vectors must share a 1-D shape")


@dataclass
class ConfidenceVector:
    w: np.ndarray


@dataclass
class KeyframeProcedure:
    frames: list[np.ndarray]          # length k+2, endpoints attached
    sampled_indices: list[int]        # k indices into the pseudo sequence
    timestamps: list[float]           # of the sampled interior frames


class PixelPoolEmbedder:
    """Training-free visual features: average-pooled pixels, L2-normalized."""

    def __init__(self, pool: int = 4):
        self.pool = pool

    def embed(self, frame: np.ndarray) -> np.ndarray:
        h, w, c = frame.shape
        p = self.pool
        if h % p or w % p:
            raise ValueError(f"frame {frame.shape} not poolable by {p}")
        pooled = frame.reshape(h // p, p, w // p, p, c).mean(axis=(1, 3))
        vec = pooled.reshape(-1).astype(np.float64)
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# visual-text scorers


def _normalize_illumination(frame: np.ndarray) -> np.ndarray:
    """Divide out the global intensity scale, estimated from the median
    pixel (mostly background), so illumination shifts cancel."""
    med = float(np.median(frame))
    bg = float(np.mean(BACKGROUND))
    scale = med / bg if med > 1e-6 else 1.0
    return frame / max(scale, 1e-6)


def _color_presence(frame: np.ndarray, softness: float) -> np.ndarray:
    """(H, W, n_colors) soft membership of each pixel to each palette color."""
    refs = np.asarray([COLORS[c] for c in COLOR_NAMES])
    d = np.linalg.norm(frame[:, :, None, :] - refs[None, None, :, :], axis=-1)
    return np.maximum(0.0, 1.0 - d / softness)


class OraclePairTextScorer:
    """Palette-delta features matched against slot-encoded captions.

    The pair feature measures, per palette color, how much soft color
    presence appeared and disappeared between the two frames, in-place
    recolor overlap, and a no-change axis that decays as pixels diverge.
    Coherent appear+gone motion across several colors is treated as a
    camera shift and folded back into the no-change axis. Captions map
    onto the same layout, so the cosine grades how well the observed
    transformation matches the described one. Heuristic by design: under
    heavy distractors or off-palette content the score degrades smoothly
    rather than being exact.
    """

    presence_softness = 0.55
    mass_scale = 0.004       # presence mass of a typical changed object
    diff_scale = 0.015       # mean absolute pixel difference of a full change
    same_decay = 4.0
    motion_floor = 0.15

    def __init__(self, grammar: Grammar | None = None):
        self.grammar = grammar or Grammar()
        self._dim = 2 * len(COLOR_NAMES) + 2

    def pair_feature(self, frame_a: np.ndarray, frame_b: np.ndarray) -> np.ndarray:
        a = _normalize_illumination(np.asarray(frame_a, dtype=np.float64))
        b = _normalize_illumination(np.asarray(frame_b, dtype=np.float64))
        pa = _color_presence(a, self.presence_softness)
        pb = _color_presence(b, self.presence_softness)
        gain = np.maximum(0.0, pb - pa)
        loss = np.maximum(0.0, pa - pb)
        appear = gain.mean(axis=(0, 1)) / self.mass_scale
        gone = loss.mean(axis=(0, 1)) / self.mass_scale
        overlap = np.minimum(gain.sum(axis=2), loss.sum(axis=2)).mean() \
            / self.mass_scale
        changed = np.abs(b - a).mean() / self.diff_scale

        moving = (appear > self.motion_floor) & (gone > self.motion_floor)
        if int(moving.sum()) >= 2:
            damp = float(np.minimum(appear, gone)[moving].min())
            appear = appear - np.where(moving, damp, 0.0)
            gone = gone - np.where(moving, damp, 0.0)
            changed = max(0.0, changed
                          - 2 * damp * self.mass_scale / self.diff_scale)

        return np.concatenate([
            np.minimum(appear, 1.0),
            np.minimum(gone, 1.0),
            [min(overlap, 1.0)],
            [max(0.0, 1.0 - self.same_decay * changed)],
        ])

    def text_feature(self, caption: str | list[str]) -> np.ndarray:
        slots = self.grammar.parse(caption)
        feat = np.zeros(self._dim)
        if slots is None:
            return feat
        idx = {c: i for i, c in enumerate(COLOR_NAMES)}
        nc = len(COLOR_NAMES)
        if slots.change_type == "none":
            feat[-1] = 1.0
        elif slots.change_type == "add":
            feat[idx[slots.color]] = 1.0
        elif slots.change_type == "drop":
            feat[nc + idx[slots.color]] = 1.0
        elif slots.change_type == "move":
            feat[idx[slots.color]] = 0.7
            feat[nc + idx[slots.color]] = 0.7
        elif slots.change_type == "color":
            feat[idx[slots.new_color]] = 0.7
            feat[nc + idx[slots.color]] = 0.7
            feat[-2] = 0.7
        return feat

    def score(self, target: np.ndarray, candidate: np.ndarray,
              caption: str | list[str]) -> float:
        return cosine(self.pair_feature(target, candidate),
                      self.text_feature(caption))


class LearnedPairTextScorer:
    """Linear pair/text encoders trained with an in-batch contrastive loss."""

    def __init__(self, vocab, dim: int = 32, pool: int = 4, seed: int = 0):
        self.vocab = vocab
        self.dim = dim
        self.pooler = PixelPoolEmbedder(pool)
        self._rng = np.random.default_rng(seed)
        self.W_img = None   # shaped lazily from the first frame
        self.W_txt = self._rng.standard_normal((dim, len(vocab))) * 0.05

    def _pair_vec(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        ea, eb = self.pooler.embed(a), self.pooler.embed(b)
        return np.concatenate([ea, eb, eb - ea])

    def _text_vec(self, caption: str | list[str]) -> np.ndarray:
        words = caption.split() if isinstance(caption, str) else caption
        vec = np.zeros(len(self.vocab))
        for w in words:
            vec[self.vocab.word_to_id.get(w, 3)] += 1.0
        n = np.linalg.norm(vec)
        return vec / n if n > 0 else vec

    def _ensure_img(self, pair_vec: np.ndarray) -> None:
        if self.W_img is None:
            self.W_img = self._rng.standard_normal(
                (self.dim, pair_vec.size)) * 0.05

    @staticmethod
    def _norm_rows(x: np.ndarray) -> np.ndarray:
        return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-9)

    def fit(self, pairs: list[tuple[np.ndarray, np.ndarray]], captions: list[str],
            epochs: int = 5, batch: int = 32, lr: float = 0.5,
            temperature: float = 0.1, seed: int = 0) -> list[float]:
        """Symmetric InfoNCE over in-batch pairs; returns per-epoch losses."""
        feats = np.stack([self._pair_vec(a, b) for a, b in pairs])
        self._ensure_img(feats[0])
        texts = np.stack([self._text_vec(c) for c in captions])
        rng = np.random.default_rng(seed)
        n = len(pairs)
        losses = []
        for _ in range(epochs):
            order = rng.permutation(n)
            total, count = 0.0, 0
            for s in range(0, n - 1, batch):
                idx = order[s:s + batch]
                if len(idx) < 2:
                    continue
                F = feats[idx] @ self.W_img.T
                T = texts[idx] @ self.W_txt.T
                Fn, Tn = self._norm_rows(F), self._norm_rows(T)
                logits = Fn @ Tn.T / temperature
                m = len(idx)
                P = np.exp(logits - logits.max(axis=1, keepdims=True))
                P = P / P.sum(axis=1, keepdims=True)
                Q = np.exp(logits - logits.max(axis=0, keepdims=True))
                Q = Q / Q.sum(axis=0, keepdims=True)
                loss = -(np.log(np.diag(P) + 1e-12).mean()
                         + np.log(np.diag(Q) + 1e-12).mean()) / 2
                total += loss * m
                count += m
                G = ((P - np.eye(m)) + (Q - np.eye(m))) / (2 * m * temperature)
                dF = G @ Tn
                dT = G.T @ Fn
                dF = (dF - Fn * (dF * Fn).sum(axis=1, keepdims=True)) \
                    / np.maximum(np.linalg.norm(F, axis=1, keepdims=True), 1e-9)
                dT = (dT - Tn * (dT * Tn).sum(axis=1, keepdims=True)) \
                    / np.maximum(np.linalg.norm(T, axis=1, keepdims=True), 1e-9)
                self.W_img -= lr * dF.T @ feats[idx]
                self.W_txt -= lr * dT.T @ texts[idx]
            losses.append(total / max(count, 1))
        return losses

    def score(self, target: np.ndarray, candidate: np.ndarray,
              caption: str | list[str]) -> float:
        vec = self._pair_vec(target, candidate)
        self._ensure_img(vec)
        return cosine(self.W_img @ vec, self.W_txt @ self._text_vec(caption))


# ---------------------------------------------------------------------------
# scoring and sampling


def embed_visual(frame: np.ndarray, embedder=None) -> np.ndarray:
    embedder = embedder or PixelPoolEmbedder()
    return embedder.embed(frame)


def similarity_profile(before: np.ndarray, after: np.ndarray,
                       pseudo, strategy: str = "visual_only",
                       caption: str | None = None,
                       embedder=None, scorer=None) -> SimilarityProfile:
    """Similarity of every pseudo-frame to each endpoint."""
    if strategy == "visual_only":
        embedder = embedder or PixelPoolEmbedder()
        e_bef = embedder.embed(before)
        e_aft = embedder.embed(after)
        feats = [embedder.embed(f) for f in pseudo.frames]
        s_bef = np.array([cosine(e_bef, f) for f in feats])
        s_aft = np.array([cosine(e_aft, f) for f in feats])
    elif strategy == "visual_text":
        if caption is None:
            raise ConfigError("visual_text strategy requires a caption")
        scorer = scorer or OraclePairTextScorer()
        s_bef = np.array([scorer.score(before, f, caption) for f in pseudo.frames])
        s_aft = np.array([scorer.score(after, f, caption) for f in pseudo.frames])
    else:
        raise ConfigError(f"unknown similarity strategy {strategy!r}")
    return SimilarityProfile(s_bef=s_bef, s_aft=s_aft, strategy=strategy)


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def confidence_scores(profile: SimilarityProfile) -> ConfidenceVector:
    """w = 1 - softmax((s_bef - s_aft)^2); peaks where the gap vanishes."""
    diff2 = (profile.s_bef - profile.s_aft) ** 2
    if not np.all(np.isfinite(diff2)):
        raise ValueError("similarity profile contains non-finite values")
    return ConfidenceVector(w=1.0 - softmax(diff2))


def top_k_indices(w: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores, ties resolved to the smaller index."""
    order = np.lexsort((np.arange(len(w)), -np.asarray(w)))
    return sorted(int(i) for i in order[:k])


def sample_keyframes(before: np.ndarray, after: np.ndarray, pseudo,
                     w: ConfidenceVector, k: int) -> KeyframeProcedure:
    """Keep the k most confident pseudo-frames and re-attach the endpoints."""
    l = len(pseudo)
    if not (1 <= k <= l):
        raise ConfigError(f"need 1 <= k <= l, got k={k}, l={l}")
    if len(w.w) != l:
        raise ConfigError("confidence vector length mismatch")
    chosen = top_k_indices(w.w, k)
    frames = [before] + [pseudo.frames[i] for i in chosen] + [after]
    return KeyframeProcedure(
        frames=frames,
        sampled_indices=chosen,
        timestamps=[pseudo.timestamps[i] for i in chosen],
    )
