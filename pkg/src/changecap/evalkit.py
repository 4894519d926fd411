"""Caption metrics, throughput measurement and attention cost accounting.

BLEU-4 and CIDEr are corpus-level and self-contained; slot accuracy
parses generated captions back through the template grammar and checks
the recovered change record against the gold one. The cost side pairs
an exact multiply-accumulate counter for the attention stack with wall
time and tokens-per-second measurements (run these on an otherwise idle
machine; timing is not enforced single-threaded).
"""

from __future__ import annotations

import math
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError

BLEU_EPSILON = 1e-9


def _tokens(text) -> list[str]:
    return text.split() if isinstance(text, str) else list(text)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates, references) -> float:
    """Corpus BLEU-4: clipped n-gram precisions, geometric mean, brevity
    penalty. Zero higher-order precisions are floored at a tiny epsilon;
    no unigram match at all scores exactly 0.
    """
    if not candidates or len(candidates) != len(references):
        raise ConfigError("need equal, non-empty candidate/reference corpora")
    matches = [0] * 5
    totals = [0] * 5
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_t = _tokens(cand)
        if isinstance(refs, str):
            refs = [refs]
        refs_t = [_tokens(r) for r in refs]
        cand_len += len(cand_t)
        ref_len += min((len(r) for r in refs_t),
                       key=lambda L: (abs(L - len(cand_t)), L))
        for n in range(1, 5):
            counts = _ngrams(cand_t, n)
            max_ref = Counter()
            for r in refs_t:
                for gram, c in _ngrams(r, n).items():
                    max_ref[gram] = max(max_ref[gram], c)
            totals[n] += sum(counts.values())
            matches[n] += sum(min(c, max_ref[g]) for g, c in counts.items())
    if cand_len == 0 or matches[1] == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        p = matches[n] / totals[n] if totals[n] else BLEU_EPSILON
        log_sum += math.log(max(p, BLEU_EPSILON))
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_sum / 4.0)


def cider(candidates, references) -> float:
    """Plain CIDEr: mean over n=1..4 of TF-IDF cosine to the references,
    averaged over the corpus and scaled by 10.
    """
    if not candidates or len(candidates) != len(references):
        raise ConfigError("need equal, non-empty candidate/reference corpora")
    refs_per_doc = []
    for refs in references:
        refs = refs if isinstance(refs, list) else [refs]
        refs_per_doc.append([_tokens(r) for r in refs])
    n_docs = len(refs_per_doc)
    if n_docs < 2:
        warnings.warn("single-document corpus: IDF is degenerate", stacklevel=2)

    doc_freq = [None] + [Counter() for _ in range(4)]
    for refs in refs_per_doc:
        for n in range(1, 5):
            seen = set()
            for r in refs:
                seen.update(_ngrams(r, n).keys())
            for gram in seen:
                doc_freq[n][gram] += 1

    def vec(tokens, n):
        counts = _ngrams(tokens, n)
        return {g: c * (math.log(n_docs) - math.log(max(doc_freq[n][g], 1.0)))
                for g, c in counts.items()}

    def cosine(a: dict, b: dict) -> float:
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        dot = sum(v * b.get(g, 0.0) for g, v in a.items())
        return dot / (na * nb)

    total = 0.0
    for cand, refs in zip(candidates, refs_per_doc):
        cand_t = _tokens(cand)
        score = 0.0
        for n in range(1, 5):
            cv = vec(cand_t, n)
            score += sum(cosine(cv, vec(r, n)) for r in refs) / len(refs)
        total += score / 4.0
    return 10.0 * total / n_docs


def exact_match(candidates: list[str], references: list[str]) -> float:
    if len(candidates) != len(references):
        raise ConfigError("corpus length mismatch")
    if not candidates:
        return 0.0
    return sum(c == r for c, r in zip(candidates, references)) / len(candidates)


def slot_accuracy(candidates: list[str], golds: list[dict],
                  grammar) -> dict[str, float]:
    """Exact slot-match rate per change category; unparseable counts wrong."""
    if len(candidates) != len(golds):
        raise ConfigError("corpus length mismatch")
    hits: Counter = Counter()
    counts: Counter = Counter()
    for cand, gold in zip(candidates, golds):
        category = gold.get("change_type", "none")
        counts[category] += 1
        parsed = grammar.parse(cand)
        if parsed is not None and parsed.to_dict() == dict(gold):
            hits[category] += 1
    report = {cat: hits[cat] / counts[cat] for cat in counts}
    report["overall"] = (sum(hits.values()) / sum(counts.values())
                         if counts else 0.0)
    return report


@dataclass
class MetricReport:
    bleu4: float
    cider: float
    exact_match: float
    slot_accuracy: dict[str, float]
    corpus_size: int
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "bleu4": self.bleu4,
            "cider": self.cider,
            "exact_match": self.exact_match,
            "slot_accuracy": self.slot_accuracy,
            "corpus_size": self.corpus_size,
            "config_hash": self.config_hash,
        }


# ---------------------------------------------------------------------------
# attention cost accounting


@dataclass
class CostProfile:
    """Exact multiply-accumulate counts for the attention stack.

    Encoder, per layer: query/key/value projections 3*n_P*d^2, output
    projection n_P*d^2, score and value mixing 2*n_P^2*d. Decoder
    self-attention mirrors that over n_T; its cross-attention score/mix
    term 2*n_P*n_T*d is tracked separately from the projections.
    """

    K: int
    n_I: int
    d: int
    l_e: int
    l_d: int
    n_T: int
    enc_proj_macs: int = 0
    enc_score_macs: int = 0
    dec_self_macs: int = 0
    dec_cross_score_macs: int = 0
    dec_cross_proj_macs: int = 0
    wall_time_s: float = 0.0
    tps: float = 0.0

    @property
    def n_P(self) -> int:
        return self.K * self.n_I

    @property
    def encoder_macs(self) -> int:
        return self.enc_proj_macs + self.enc_score_macs

    @property
    def total_macs(self) -> int:
        return (self.encoder_macs + self.dec_self_macs
                + self.dec_cross_score_macs + self.dec_cross_proj_macs)

    def row(self) -> dict:
        return {
            "K": self.K, "n_I": self.n_I, "d": self.d, "l_e": self.l_e,
            "l_d": self.l_d, "n_T": self.n_T, "n_P": self.n_P,
            "enc_proj_macs": self.enc_proj_macs,
            "enc_score_macs": self.enc_score_macs,
            "encoder_macs": self.encoder_macs,
            "dec_self_macs": self.dec_self_macs,
            "dec_cross_score_macs": self.dec_cross_score_macs,
            "dec_cross_proj_macs": self.dec_cross_proj_macs,
            "total_macs": self.total_macs,
            "wall_time_s": self.wall_time_s,
            "tps": self.tps,
        }


def attention_op_count(K: int, n_I: int, d: int, l_e: int, l_d: int = 0,
                       n_T: int = 0) -> CostProfile:
    """Closed-form attention MAC counts for one forward pass."""
    if min(K, n_I, d) <= 0 or l_e < 0 or l_d < 0 or n_T < 0:
        raise ConfigError("dimensions must be positive")
    n_p = K * n_I
    profile = CostProfile(K=K, n_I=n_I, d=d, l_e=l_e, l_d=l_d, n_T=n_T)
    profile.enc_proj_macs = l_e * 4 * n_p * d * d
    profile.enc_score_macs = l_e * 2 * n_p * n_p * d
    if l_d and n_T:
        profile.dec_self_macs = l_d * (4 * n_T * d * d + 2 * n_T * n_T * d)
        profile.dec_cross_score_macs = l_d * 2 * n_p * n_T * d
        profile.dec_cross_proj_macs = l_d * (2 * n_p * d * d + 2 * n_T * d * d)
    return profile


# ---------------------------------------------------------------------------
# measured timings


def time_encoder_forward(model, K: int, batch: int = 4, reps: int = 15,
                         warmup: int = 5) -> float:
    """Median wall time of one encoder forward at procedure length K."""
    cfg = model.cfg
    if K < 2:
        raise ConfigError("K counts the endpoints; need K >= 2")
    torch.manual_seed(0)
    n_i = cfg.n_I
    before = torch.randn(batch, n_i, cfg.d)
    after = torch.randn(batch, n_i, cfg.d)
    query = model.build_query_input(before, after, k=K - 2)
    with torch.no_grad():
        for _ in range(warmup):
            model.encode_pair(query)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            model.encode_pair(query)
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def measure_tps(model, pairs, mode: str = "implicit", warmup: int = 3,
                max_len: int = 0, explicit_ctx: dict | None = None,
                force_full_length: bool = True) -> dict:
    """Greedy tokens per second at batch size 1.

    ``pairs`` holds (before_embeds, after_embeds) tensors for the implicit
    path; the explicit path receives raw frames through ``explicit_ctx``
    (interpolator, pipeline config, embedder) and pays for interpolation,
    scoring, sampling and re-embedding inside the timed region. Data
    loading stays outside the clock; the encoder forward is inside.
    """
    if len(pairs) <= warmup:
        raise ConfigError(f"need more than {warmup} pairs for warmup")
    tokens = 0
    elapsed = 0.0
    for i, item in enumerate(pairs):
        timed = i >= warmup
        t0 = time.perf_counter()
        if mode == "implicit":
            before, after = item
            seqs, _ = model.caption_pair(before, after, max_len=max_len,
                                         force_full_length=force_full_length)
        elif mode == "explicit":
            seqs = _explicit_caption(model, item, explicit_ctx, max_len,
                                     force_full_length)
        else:
            raise ConfigError(f"unknown TPS mode {mode!r}")
        dt = time.perf_counter() - t0
        if timed:
            tokens += len(seqs[0])
            elapsed += dt
    return {"tps": tokens / elapsed if elapsed > 0 else 0.0,
            "tokens": tokens, "seconds": elapsed}


def _explicit_caption(model, item, ctx, max_len, force_full_length):
    from .interp import generate_procedure
    from .sampler import confidence_scores, sample_keyframes, similarity_profile

    before_frame, after_frame = item
    interp = ctx["interpolator"]
    embedder = ctx["embedder"]
    l, k = ctx["l"], ctx["k"]
    pseudo = generate_procedure(interp, before_frame, after_frame, l)
    profile = similarity_profile(before_frame, after_frame, pseudo,
                                 "visual_only")
    chosen = sample_keyframes(before_frame, after_frame, pseudo,
                              confidence_scores(profile), k)
    emb = embedder.embed_frames(chosen.frames)
    before = torch.from_numpy(emb[0]).unsqueeze(0)
    after = torch.from_numpy(emb[-1]).unsqueeze(0)
    keyframes = torch.from_numpy(emb[1:-1]).unsqueeze(0)
    seqs, _ = model.caption_explicit(before, keyframes, after, max_len=max_len,
                                     force_full_length=force_full_length)
    return seqs
