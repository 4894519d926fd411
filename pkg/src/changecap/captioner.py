"""Captioning over an image pair through the shared procedure encoder.

The encoder input interleaves k*n_I learnable query rows (copies of the
pretrained mask embedding) between the before and after patch
embeddings; a small transformer decoder cross-attends to the encoder
output and emits the caption autoregressively. The explicit variant
fills the query slots with embeddings of actually sampled keyframes
instead, at extra inference cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrainConfig
from .errors import ConfigError
from .procnet import MultiHeadSelfAttention, ProcedureEncoder
from .synthdata import BOS, EOS, PAD


@dataclass
class QueryInput:
    rows: torch.Tensor          # (B, (k+2)*n_I, d) before positions are added
    frame_ids: list[int]
    k: int


class CrossAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        m = memory.shape[1]
        q = self.q(x).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        k, v = self.kv(memory).chunk(2, dim=-1)
        k = k.view(b, m, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, m, self.heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)).softmax(-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, s, d))


class DecoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, ffn_mult: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = MultiHeadSelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.cross = CrossAttention(d, heads)
        self.ln3 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, ffn_mult * d), nn.GELU(), nn.Linear(ffn_mult * d, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory, causal_mask):
        h = self.ln1(x)
        x = x + self.drop(self._causal_self(h, causal_mask))
        x = x + self.drop(self.cross(self.ln2(x), memory))
        return x + self.drop(self.ffn(self.ln3(x)))

    def _causal_self(self, h, causal_mask):
        b, s, d = h.shape
        attn = self.self_attn
        q, k, v = attn.qkv(h).chunk(3, dim=-1)
        q = q.view(b, s, attn.heads, attn.head_dim).transpose(1, 2)
        k = k.view(b, s, attn.heads, attn.head_dim).transpose(1, 2)
        v = v.view(b, s, attn.heads, attn.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(attn.head_dim)
        scores = scores.masked_fill(causal_mask, float("-inf"))
        mixed = (scores.softmax(-1) @ v).transpose(1, 2).reshape(b, s, d)
        return attn.out(mixed)


class CaptionDecoder(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        d = cfg.d
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.vocab_size, d, padding_idx=PAD)
        self.pos_embed = nn.Embedding(cfg.max_text + 1, d)
        self.blocks = nn.ModuleList([
            DecoderBlock(d, cfg.heads, cfg.ffn_mult, cfg.dropout)
            for _ in range(cfg.l_d)])
        self.out_head = nn.Linear(d, cfg.vocab_size)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        nn.init.normal_(self.pos_embed.weight, std=0.02)
        with torch.no_grad():
            self.token_embed.weight[PAD].zero_()
        nn.init.zeros_(self.out_head.weight)
        nn.init.zeros_(self.out_head.bias)

    def forward(self, token_ids: torch.Tensor,
                memory: torch.Tensor) -> torch.Tensor:
        b, s = token_ids.shape
        pos = torch.arange(s, device=token_ids.device)
        x = self.token_embed(token_ids) + self.pos_embed(pos).unsqueeze(0)
        causal = torch.triu(
            torch.ones(s, s, dtype=torch.bool, device=token_ids.device), 1)
        for block in self.blocks:
            x = block(x, memory, causal)
        return self.out_head(x)


class CaptionModel(nn.Module):
    """Shared procedure encoder plus the caption decoder."""

    def __init__(self, cfg: TrainConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.encoder = ProcedureEncoder(cfg)
        self.decoder = CaptionDecoder(cfg)
        if dtype is not torch.float32:
            self.to(dtype)

    # -- encoder side -------------------------------------------------------

    def build_query_input(self, before_embeds: torch.Tensor,
                          after_embeds: torch.Tensor,
                          k: int | None = None) -> QueryInput:
        """[before patches | k*n_I mask-embedding queries | after patches]."""
        if k is None:
            k = self.cfg.k
        if k < 0:
            raise ConfigError(f"k must be >= 0, got {k}")
        b, n_i, d = before_embeds.shape
        dtype = self.encoder.mask_embedding.dtype
        parts = [before_embeds.to(dtype)]
        if k > 0:
            queries = self.encoder.mask_embedding.expand(b, k * n_i, d)
            parts.append(queries)
        parts.append(after_embeds.to(dtype))
        rows = torch.cat(parts, dim=1)
        frame_ids = [0] + list(range(1, k + 1)) + [k + 1]
        return QueryInput(rows=rows, frame_ids=frame_ids, k=k)

    def build_explicit_input(self, before_embeds, keyframe_embeds,
                             after_embeds) -> QueryInput:
        """Query slots filled with sampled-frame embeddings, (B, k, n_I, d)."""
        k = keyframe_embeds.shape[1]
        if k != self.cfg.k:
            raise ConfigError(
                f"explicit procedure length {k} != configured k {self.cfg.k}")
        b, n_i, d = before_embeds.shape
        dtype = self.encoder.mask_embedding.dtype
        rows = torch.cat([
            before_embeds.to(dtype),
            keyframe_embeds.reshape(b, k * n_i, d).to(dtype),
            after_embeds.to(dtype),
        ], dim=1)
        return QueryInput(rows=rows, frame_ids=[0, *range(1, k + 1), k + 1], k=k)

    def encode_pair(self, query_input: QueryInput) -> torch.Tensor:
        b = query_input.rows.shape[0]
        n_frames = len(query_input.frame_ids)
        pos = self.encoder.visual_positions(n_frames, b, query_input.frame_ids)
        x = query_input.rows + pos.to(query_input.rows.dtype)
        return self.encoder.encode(x)

    # -- losses and generation ----------------------------------------------

    def caption_loss(self, memory: torch.Tensor,
                     gold_ids: torch.Tensor) -> torch.Tensor:
        """Teacher-forced mean NLL over non-pad caption positions."""
        if gold_ids.shape[1] > self.cfg.max_text + 1:
            raise ConfigError(
                f"caption length {gold_ids.shape[1]} exceeds max_text")
        inputs = gold_ids[:, :-1]
        targets = gold_ids[:, 1:]
        logits = self.decoder(inputs, memory)
        return F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), targets.reshape(-1).long(),
            ignore_index=PAD)

    @torch.no_grad()
    def generate(self, memory: torch.Tensor, mode: str = "greedy",
                 max_len: int = 0, beam: int = 3, length_alpha: float = 0.7,
                 force_full_length: bool = False):
        """Decode captions; returns per-row token lists (through EOS when
        produced, BOS stripped) and matching per-token log-probs."""
        if max_len <= 0:
            max_len = self.cfg.max_text
        if mode == "greedy":
            return self._greedy(memory, max_len, force_full_length)
        if mode == "beam":
            if memory.shape[0] != 1:
                raise ConfigError("beam search decodes one pair at a time")
            return self._beam(memory, max_len, beam, length_alpha)
        raise ConfigError(f"unknown decode mode {mode!r}")

    def _greedy(self, memory, max_len, force_full_length=False):
        b = memory.shape[0]
        device = memory.device
        ids = torch.full((b, 1), BOS, dtype=torch.long, device=device)
        seqs: list[list[int]] = [[] for _ in range(b)]
        logps: list[list[float]] = [[] for _ in range(b)]
        finished = [False] * b
        for _ in range(max_len):
            logits = self.decoder(ids, memory)[:, -1]
            logp = F.log_softmax(logits.float(), dim=-1)
            nxt = logp.argmax(dim=-1)
            for i in range(b):
                if not finished[i]:
                    tok = int(nxt[i])
                    seqs[i].append(tok)
                    logps[i].append(float(logp[i, tok]))
                    if tok == EOS and not force_full_length:
                        finished[i] = True
            ids = torch.cat([ids, nxt.unsqueeze(1)], dim=1)
            if all(finished):
                break
        return seqs, logps

    def _beam(self, memory, max_len, beam, alpha):
        device = memory.device
        live = [([BOS], [], 0.0)]
        done: list[tuple[list[int], list[float], float]] = []
        for _ in range(max_len):
            candidates = []
            for seq, lps, score in live:
                ids = torch.tensor([seq], dtype=torch.long, device=device)
                logits = self.decoder(ids, memory)[:, -1]
                logp = F.log_softmax(logits.float(), dim=-1)[0]
                top = torch.topk(logp, min(beam, logp.shape[-1]))
                for val, tok in zip(top.values.tolist(), top.indices.tolist()):
                    candidates.append((seq + [tok], lps + [val], score + val))
            candidates.sort(key=lambda c: (-c[2], c[0]))
            live = []
            for seq, lps, score in candidates:
                if seq[-1] == EOS:
                    done.append((seq, lps, score))
                else:
                    live.append((seq, lps, score))
                if len(live) == beam:
                    break
            if not live:
                break
        done.extend(live)

        def final_score(item):
            seq, _, score = item
            return score / (max(len(seq) - 1, 1) ** alpha)

        best_seq, best_lps, _ = max(done, key=final_score)
        return [best_seq[1:]], [best_lps]

    @torch.no_grad()
    def caption_pair(self, before_embeds, after_embeds, mode="greedy",
                     max_len=0, beam=3, force_full_length=False):
        memory = self.encode_pair(self.build_query_input(before_embeds,
                                                         after_embeds))
        return self.generate(memory, mode=mode, max_len=max_len, beam=beam,
                             force_full_length=force_full_length)

    @torch.no_grad()
    def caption_explicit(self, before_embeds, keyframe_embeds, after_embeds,
                         mode="greedy", max_len=0,
                         force_full_length=False):
        memory = self.encode_pair(self.build_explicit_input(
            before_embeds, keyframe_embeds, after_embeds))
        return self.generate(memory, mode=mode, max_len=max_len,
                             force_full_length=force_full_length)


def ids_to_words(ids, vocab) -> list[str]:
    return vocab.decode([int(i) for i in ids])
