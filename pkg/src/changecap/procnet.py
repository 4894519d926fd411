"""Procedure encoder, multi-granularity masking, warped negatives and the
three pretraining losses.

The encoder is a pre-norm bidirectional transformer over the sequence
[align | caption tokens | csy | visual patches]. Visual patches can be
replaced by a shared learnable mask embedding according to one of four
masking schemes; the masked positions are reconstructed as discrete
codebook ids (token head), while two binary heads on the special-token
states discriminate aligned captions and temporally coherent sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrainConfig
from .errors import ConfigError

MASK_SCHEMES = ("entire", "random_patch", "in_block", "out_block")
MASK_SCHEME_PROBS = (0.1, 0.7, 0.1, 0.1)

RANDOM_PATCH_RATE = (0.2, 0.5)     # per-index Bernoulli rate interval
BLOCK_AREA_RATIO = (0.2, 0.8)      # block region area / frame area

WARP_STRATEGIES = ("batch_swap", "frame_shuffle", "color_shift", "affine")
AFFINE_ANGLE = 30.0                # degrees
AFFINE_TRANSLATE = 0.1             # fraction of image side
AFFINE_SCALE = 0.1                 # scale drawn from 1 +- this
COLOR_SHIFT_RANGE = (0.1, 0.5)     # |a| for the channel shift


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class BlockRegion:
    x1: int
    y1: int
    x2: int
    y2: int
    area_ratio: float

    def __post_init__(self):
        if not (0 < self.x1 < self.x2) or not (0 < self.y1 < self.y2):
            raise ConfigError(f"block corners must be strictly interior: {self}")

    def member_mask(self, grid_h: int, grid_w: int) -> np.ndarray:
        m = np.zeros((grid_h, grid_w), dtype=bool)
        m[self.y1:self.y2 + 1, self.x1:self.x2 + 1] = True
        return m

    @property
    def area(self) -> int:
        return (self.x2 - self.x1 + 1) * (self.y2 - self.y1 + 1)


@dataclass
class MaskIndexSet:
    flags: np.ndarray   # uint8 over the (k+2)*n_I visual positions
    scheme: str
    region: BlockRegion | None = None


def sample_block_region(rng: np.random.Generator, grid_h: int,
                        grid_w: int) -> BlockRegion:
    """Draw a strictly interior rectangle with area ratio in [0.2, 0.8].

    The target ratio is uniform on the interval; the width is drawn
    uniformly among values whose rounded ratio-matching height stays in
    bounds, and the rectangle position is uniform over the clamped space.
    """
    if grid_w < 3 or grid_h < 3:
        raise ConfigError(f"grid {grid_h}x{grid_w} too small for a block region")
    total = grid_h * grid_w
    ratio = rng.uniform(*BLOCK_AREA_RATIO)
    target = ratio * total

    def height_for(width: int) -> int:
        return int(np.clip(round(target / width), 2, grid_h - 1))

    widths = np.arange(2, grid_w)
    feasible = [w for w in widths
                if BLOCK_AREA_RATIO[0] <= w * height_for(w) / total
                <= BLOCK_AREA_RATIO[1]]
    if feasible:
        width = int(feasible[rng.integers(0, len(feasible))])
    else:
        width = int(widths[np.argmin(
            [abs(w * height_for(w) - target) for w in widths])])
    height = height_for(width)

    x1 = int(rng.integers(1, grid_w - width + 1))
    y1 = int(rng.integers(1, grid_h - height + 1))
    return BlockRegion(x1=x1, y1=y1, x2=x1 + width - 1, y2=y1 + height - 1,
                       area_ratio=width * height / total)


def sample_mask(rng: np.random.Generator, n_frames: int, grid_h: int,
                grid_w: int, scheme: str | None = None) -> MaskIndexSet:
    """Draw one masking scheme and its flags over all visual positions."""
    n_i = grid_h * grid_w
    total = n_frames * n_i
    if scheme is None:
        scheme = MASK_SCHEMES[rng.choice(len(MASK_SCHEMES), p=MASK_SCHEME_PROBS)]
    if scheme == "in_block" and (grid_w < 3 or grid_h < 3):
        scheme = "random_patch"   # no legal interior block on this grid
    if scheme == "out_block" and (grid_w < 3 or grid_h < 3):
        scheme = "random_patch"

    region = None
    if scheme == "entire":
        flags = np.ones(total, dtype=np.uint8)
    elif scheme == "random_patch":
        rates = rng.uniform(*RANDOM_PATCH_RATE, size=total)
        flags = (rng.random(total) < rates).astype(np.uint8)
    elif scheme in ("in_block", "out_block"):
        region = sample_block_region(rng, grid_h, grid_w)
        inside = region.member_mask(grid_h, grid_w).reshape(-1)
        per_frame = inside if scheme == "in_block" else ~inside
        flags = np.tile(per_frame.astype(np.uint8), n_frames)
    else:
        raise ConfigError(f"unknown masking scheme {scheme!r}")
    return MaskIndexSet(flags=flags, scheme=scheme, region=region)


def apply_mask(visual_embeds: torch.Tensor, flags: torch.Tensor,
               mask_embedding: torch.Tensor) -> torch.Tensor:
    """Replace flagged rows with the shared mask embedding, exactly."""
    if visual_embeds.shape[-2] != flags.shape[-1]:
        raise ConfigError("mask flags do not match visual positions")
    cond = flags.to(torch.bool).unsqueeze(-1)
    return torch.where(cond, mask_embedding.to(visual_embeds.dtype), visual_embeds)


# ---------------------------------------------------------------------------
# warped negatives


@dataclass
class WarpParams:
    strategy: str
    permutation: tuple[int, ...] | None = None      # frame_shuffle
    swap_position: int = 0                          # batch_swap
    channel: int = 0                                # color_shift
    shift: float = 0.0
    angle_deg: float = 0.0                          # affine
    t_x: float = 0.0
    t_y: float = 0.0
    scale: float = 1.0


def sample_warp_params(rng: np.random.Generator, n_frames: int,
                       strategy: str | None = None,
                       batch_size: int = 1) -> WarpParams:
    if strategy is None:
        strategy = WARP_STRATEGIES[rng.integers(0, len(WARP_STRATEGIES))]
    if strategy == "batch_swap" and batch_size < 2:
        strategy = "frame_shuffle"   # no donor record available
    if strategy in ("batch_swap", "frame_shuffle") and n_frames < 2:
        raise ConfigError("shuffle warps need at least two frames")

    if strategy == "batch_swap":
        return WarpParams("batch_swap",
                          swap_position=int(rng.integers(0, n_frames)))
    if strategy == "frame_shuffle":
        while True:
            perm = tuple(int(i) for i in rng.permutation(n_frames))
            if perm != tuple(range(n_frames)):
                return WarpParams("frame_shuffle", permutation=perm)
    if strategy == "color_shift":
        magnitude = rng.uniform(*COLOR_SHIFT_RANGE)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return WarpParams("color_shift", channel=int(rng.integers(0, 3)),
                          shift=float(sign * magnitude))
    if strategy == "affine":
        return WarpParams(
            "affine",
            angle_deg=float(rng.uniform(-AFFINE_ANGLE, AFFINE_ANGLE)),
            t_x=float(rng.uniform(-AFFINE_TRANSLATE, AFFINE_TRANSLATE)),
            t_y=float(rng.uniform(-AFFINE_TRANSLATE, AFFINE_TRANSLATE)),
            scale=float(rng.uniform(1 - AFFINE_SCALE, 1 + AFFINE_SCALE)),
        )
    raise ConfigError(f"unknown warp strategy {strategy!r}")


def affine_warp(frame: np.ndarray, angle_deg: float, t_x: float, t_y: float,
                scale: float) -> np.ndarray:
    """Rotate-scale-translate about the image center, bilinear, zero fill.

    Identity parameters reproduce the input exactly.
    """
    h, w = frame.shape[:2]
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # invert [x'; y'] = s*R*[x; y] + t to sample the source position
    xo = xs - cx - t_x * w
    yo = ys - cy - t_y * h
    xs_src = (cos_t * xo + sin_t * yo) / scale + cx
    ys_src = (-sin_t * xo + cos_t * yo) / scale + cy

    x0 = np.floor(xs_src).astype(np.int64)
    y0 = np.floor(ys_src).astype(np.int64)
    fx = xs_src - x0
    fy = ys_src - y0

    out = np.zeros_like(frame, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            wgt = ((1 - fx) if dx == 0 else fx) * ((1 - fy) if dy == 0 else fy)
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            wv = np.where(valid, wgt, 0.0)
            sample = frame[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += wv[..., None] * sample
    return out.astype(frame.dtype)


def warp_negative(frames: np.ndarray, params: WarpParams,
                  donor_frame: np.ndarray | None = None) -> np.ndarray:
    """Temporally incoherent variant of a (T, H, W, C) frame sequence."""
    frames = np.asarray(frames)
    if params.strategy == "batch_swap":
        if donor_frame is None:
            raise ConfigError("batch_swap needs a donor frame from another record")
        out = frames.copy()
        out[params.swap_position] = donor_frame
        return out
    if params.strategy == "frame_shuffle":
        perm = params.permutation
        if perm is None or tuple(sorted(perm)) != tuple(range(len(frames))):
            raise ConfigError("frame_shuffle needs a full permutation")
        if perm == tuple(range(len(frames))):
            raise ConfigError("frame_shuffle permutation must not be the identity")
        return frames[list(perm)].copy()
    if params.strategy == "color_shift":
        out = frames.copy()
        out[..., params.channel] = np.clip(
            out[..., params.channel] + params.shift, 0.0, 1.0)
        return out
    if params.strategy == "affine":
        return np.stack([
            affine_warp(f, params.angle_deg, params.t_x, params.t_y, params.scale)
            for f in frames])
    raise ConfigError(f"unknown warp strategy {params.strategy!r}")


# ---------------------------------------------------------------------------
# transformer encoder


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ConfigError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.head_dim = d // heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor,
                key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, s, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, s, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, s, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, s, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            pad = key_padding_mask[:, None, None, :]
            scores = scores.masked_fill(pad, float("-inf"))
        attn = scores.softmax(dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, s, d)
        return self.out(mixed)


class EncoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, ffn_mult: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, ffn_mult * d), nn.GELU(), nn.Linear(ffn_mult * d, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_padding_mask=None):
        x = x + self.drop(self.attn(self.ln1(x), key_padding_mask))
        return x + self.drop(self.ffn(self.ln2(x)))


@dataclass
class EncoderOutput:
    h_align: torch.Tensor      # (B, d)
    h_text: torch.Tensor       # (B, n_T, d)
    h_csy: torch.Tensor        # (B, d)
    h_visual: torch.Tensor     # (B, (k+2)*n_I, d)


class ProcedureEncoder(nn.Module):
    """Bidirectional transformer over [align | text | csy | visual]."""

    def __init__(self, cfg: TrainConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        cfg.validate()
        if cfg.vocab_size < 5:
            raise ConfigError("vocab_size must be set from the dataset vocabulary")
        self.cfg = cfg
        d = cfg.d
        self.align_token = nn.Parameter(torch.zeros(d))
        self.csy_token = nn.Parameter(torch.zeros(d))
        self.mask_embedding = nn.Parameter(torch.zeros(d))
        self.text_embed = nn.Embedding(cfg.vocab_size, d, padding_idx=0)
        self.text_pos = nn.Embedding(cfg.max_text, d)
        self.patch_pos = nn.Embedding(cfg.n_I, d)
        self.frame_embed = nn.Embedding(cfg.max_frames, d)
        self.blocks = nn.ModuleList([
            EncoderBlock(d, cfg.heads, cfg.ffn_mult, cfg.dropout)
            for _ in range(cfg.l_e)])
        self.msm_head = nn.Linear(d, cfg.K_cb)
        self.align_head = nn.Linear(d, 1)
        self.csy_head = nn.Linear(d, 1)
        self._init_params()
        if dtype is not torch.float32:
            self.to(dtype)
        self.empty_mask_events = 0
        self.skipped_align_batches = 0

    def _init_params(self):
        for mod in (self.text_embed, self.text_pos, self.patch_pos,
                    self.frame_embed):
            nn.init.normal_(mod.weight, std=0.02)
        with torch.no_grad():
            self.text_embed.weight[0].zero_()
            for tok in (self.align_token, self.csy_token, self.mask_embedding):
                tok.normal_(std=0.02)
        # zero-initialized heads give exact uniform predictions at step 0
        for head in (self.msm_head, self.align_head, self.csy_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    # -- input assembly ----------------------------------------------------

    def visual_positions(self, n_frames: int, batch: int,
                         frame_ids: list[int] | None = None) -> torch.Tensor:
        """Learned patch-position plus frame-index embeddings, (B, V, d)."""
        n_i = self.cfg.n_I
        dev = self.patch_pos.weight.device
        patch_idx = torch.arange(n_i, device=dev).repeat(n_frames)
        if frame_ids is None:
            frame_ids = list(range(n_frames))
        if max(frame_ids) >= self.cfg.max_frames:
            raise ConfigError(
                f"frame index {max(frame_ids)} exceeds max_frames="
                f"{self.cfg.max_frames}")
        frame_idx = torch.tensor(frame_ids, device=dev).repeat_interleave(n_i)
        pos = self.patch_pos(patch_idx) + self.frame_embed(frame_idx)
        return pos.unsqueeze(0).expand(batch, -1, -1)

    def assemble_stage1(self, text_ids: torch.Tensor,
                        visual_embeds: torch.Tensor,
                        mask_flags: torch.Tensor | None = None):
        """Build [align | text | csy | visual] plus the key padding mask."""
        b, n_t = text_ids.shape
        v = visual_embeds.shape[1]
        n_frames = v // self.cfg.n_I
        if n_frames * self.cfg.n_I != v:
            raise ConfigError("visual length not a multiple of n_I")
        dtype = self.align_token.dtype

        text = self.text_embed(text_ids) + self.text_pos(
            torch.arange(n_t, device=text_ids.device)).unsqueeze(0)
        visual = visual_embeds.to(dtype)
        if mask_flags is not None:
            visual = apply_mask(visual, mask_flags, self.mask_embedding)
        visual = visual + self.visual_positions(n_frames, b).to(dtype)

        align = self.align_token.expand(b, 1, -1)
        csy = self.csy_token.expand(b, 1, -1)
        x = torch.cat([align, text, csy, visual], dim=1)

        pad = torch.zeros(b, x.shape[1], dtype=torch.bool, device=x.device)
        pad[:, 1:1 + n_t] = text_ids == 0
        return x, pad, n_t

    def encode(self, x: torch.Tensor,
               key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        for block in self.blocks:
            x = block(x, key_padding_mask)
        return x

    def forward_stage1(self, text_ids: torch.Tensor,
                       visual_embeds: torch.Tensor,
                       mask_flags: torch.Tensor | None = None) -> EncoderOutput:
        x, pad, n_t = self.assemble_stage1(text_ids, visual_embeds, mask_flags)
        h = self.encode(x, pad)
        return EncoderOutput(
            h_align=h[:, 0],
            h_text=h[:, 1:1 + n_t],
            h_csy=h[:, 1 + n_t],
            h_visual=h[:, 2 + n_t:],
        )


# ---------------------------------------------------------------------------
# losses


def msm_loss(model: ProcedureEncoder, output: EncoderOutput,
             tokens: torch.Tensor, mask_flags: torch.Tensor) -> torch.Tensor:
    """Mean NLL of the true codebook ids over masked positions only.

    Per-sample normalization by that sample's masked count, then averaged;
    samples with an empty mask contribute zero and bump a warning counter.
    """
    logits = model.msm_head(output.h_visual)
    logp = F.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, tokens.long().unsqueeze(-1)).squeeze(-1)
    flags = mask_flags.to(picked.dtype)
    counts = flags.sum(dim=1)
    zero = counts == 0
    if bool(zero.any()):
        model.empty_mask_events += int(zero.sum())
    safe = torch.clamp(counts, min=1.0)
    per_sample = -(picked * flags).sum(dim=1) / safe
    per_sample = torch.where(zero, torch.zeros_like(per_sample), per_sample)
    return per_sample.mean()


def _binary_pair_loss(head: nn.Linear, h_pos: torch.Tensor,
                      h_neg: torch.Tensor) -> torch.Tensor:
    logit_pos = head(h_pos).squeeze(-1)
    logit_neg = head(h_neg).squeeze(-1)
    return F.softplus(-logit_pos).mean() + F.softplus(logit_neg).mean()


def align_loss(model: ProcedureEncoder, pos: EncoderOutput,
               neg: EncoderOutput) -> torch.Tensor:
    """-log p(aligned | pos) - log p(not aligned | neg) on the align state."""
    return _binary_pair_loss(model.align_head, pos.h_align, neg.h_align)


def csy_loss(model: ProcedureEncoder, pos: EncoderOutput,
             neg: EncoderOutput) -> torch.Tensor:
    """Same discrimination on the consistency state, warped-frame negative."""
    return _binary_pair_loss(model.csy_head, pos.h_csy, neg.h_csy)


@dataclass
class Stage1Batch:
    """Everything one optimization step needs, fully materialized."""

    text_ids: torch.Tensor          # (B, n_T)
    visual_embeds: torch.Tensor     # (B, V, d) unmasked
    mask_flags: torch.Tensor        # (B, V)
    tokens: torch.Tensor            # (B, V) codebook ids
    neg_text_ids: torch.Tensor | None   # deranged captions, None if B == 1
    warped_visual_embeds: torch.Tensor  # (B, V, d)


def stage1_loss(model: ProcedureEncoder, batch: Stage1Batch,
                use_align: bool = True, use_csy: bool = True):
    """Sum of the three pretraining terms plus a per-term breakdown."""
    out_pos = model.forward_stage1(batch.text_ids, batch.visual_embeds,
                                   batch.mask_flags)
    terms = {}
    total = msm_loss(model, out_pos, batch.tokens, batch.mask_flags)
    terms["msm"] = float(total.detach())

    if use_align:
        if batch.neg_text_ids is None:
            model.skipped_align_batches += 1
            terms["align"] = 0.0
        else:
            out_neg_t = model.forward_stage1(
                batch.neg_text_ids, batch.visual_embeds, batch.mask_flags)
            term = align_loss(model, out_pos, out_neg_t)
            terms["align"] = float(term.detach())
            total = total + term
    if use_csy:
        out_neg_v = model.forward_stage1(
            batch.text_ids, batch.warped_visual_embeds, batch.mask_flags)
        term = csy_loss(model, out_pos, out_neg_v)
        terms["csy"] = float(term.detach())
        total = total + term

    terms["total"] = float(total.detach())
    return total, terms
