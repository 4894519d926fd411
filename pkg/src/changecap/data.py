"""Dataset artifacts on disk and in memory.

A data directory holds the generated images and per-split manifests,
plus derived artifacts: precomputed procedures (pseudo-frame PNGs and
the selected keyframe indices), the fitted codebook and the frozen
patch embedder. Training loads everything into RAM once; batches are
assembled from per-purpose seeded random streams so prefetch order can
never change results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import DataConfig, PipelineConfig, TrainConfig
from .errors import ConfigError, MissingArtifactError
from .interp import BlendInterpolator, OracleInterpolator, generate_procedure
from .procnet import Stage1Batch, sample_mask, sample_warp_params, warp_negative
from .sampler import (OraclePairTextScorer, confidence_scores, sample_keyframes,
                      similarity_profile)
from .synthdata import (DatasetManifest, DatasetRecord, change_from_dict,
                        generate_scene, load_png, read_data_config,
                        read_manifest, save_png)
from .vq import (Codebook, PatchEmbedder, fit_codebook, load_codebook,
                 load_embedder, save_codebook, save_embedder, tokenize_frames)

SPLITS = ("train", "val", "test")


def codebook_path(data_dir: str | Path) -> Path:
    return Path(data_dir) / "codebook.blob"


def embedder_path(data_dir: str | Path) -> Path:
    return Path(data_dir) / "embedder.blob"


def procedures_path(data_dir: str | Path, split: str) -> Path:
    return Path(data_dir) / f"procedures.{split}.jsonl"


# ---------------------------------------------------------------------------
# precompute: pseudo-procedures + sampled keyframes, persisted as PNG lists


@dataclass
class ProcedureEntry:
    id: int
    pseudo_paths: list[str]
    sampled_indices: list[int]
    timestamps: list[float]
    source: str
    strategy: str


def precompute_procedures(data_dir: str | Path, pipe: PipelineConfig,
                          force: bool = False) -> None:
    data_dir = Path(data_dir)
    data_cfg = read_data_config(data_dir)
    for split in SPLITS:
        out_path = procedures_path(data_dir, split)
        if out_path.exists() and not force:
            raise ConfigError(f"{out_path} exists; pass force to recompute")
        manifest = read_manifest(data_dir, split)
        frame_dir = data_dir / "procedures" / split
        frame_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for rec in manifest.records:
            before = load_png(data_dir / rec.before_path)
            after = load_png(data_dir / rec.after_path)
            interp = _make_interpolator(pipe, data_cfg, rec)
            pseudo = generate_procedure(interp, before, after, pipe.l)
            profile = _score_profile(pipe, before, after, pseudo, rec)
            w = confidence_scores(profile)
            chosen = sample_keyframes(before, after, pseudo, w, pipe.k)
            paths = []
            for j, frame in enumerate(pseudo.frames):
                rel = f"procedures/{split}/{rec.id:06d}_{j}.png"
                save_png(frame, data_dir / rel)
                paths.append(rel)
            lines.append(json.dumps({
                "id": rec.id,
                "pseudo_paths": paths,
                "sampled_indices": chosen.sampled_indices,
                "timestamps": [round(t, 6) for t in chosen.timestamps],
                "source": pseudo.source,
                "strategy": profile.strategy,
            }, sort_keys=True))
        out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _make_interpolator(pipe: PipelineConfig, data_cfg: DataConfig,
                       rec: DatasetRecord):
    if pipe.interpolator == "blend":
        return BlendInterpolator(gate=pipe.blend_gate)
    if pipe.interpolator == "oracle":
        scene = generate_scene(rec.seed, data_cfg)
        change = change_from_dict(rec.change_spec)
        return OracleInterpolator(scene, change, data_cfg.canvas)
    raise ConfigError(f"unknown interpolator {pipe.interpolator!r}")


def _score_profile(pipe: PipelineConfig, before, after, pseudo,
                   rec: DatasetRecord):
    if pipe.strategy == "visual_only":
        return similarity_profile(before, after, pseudo, "visual_only")
    if pipe.strategy == "visual_text":
        if pipe.scorer != "oracle":
            raise ConfigError(
                "precompute supports the oracle visual_text scorer; train a "
                "learned scorer separately and pass it programmatically")
        return similarity_profile(before, after, pseudo, "visual_text",
                                  caption=rec.captions[0],
                                  scorer=OraclePairTextScorer())
    raise ConfigError(f"unknown strategy {pipe.strategy!r}")


def read_procedures(data_dir: str | Path, split: str) -> dict[int, ProcedureEntry]:
    path = procedures_path(data_dir, split)
    if not path.exists():
        raise MissingArtifactError(
            f"{path} missing; run the precompute step first")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        d = json.loads(line)
        out[d["id"]] = ProcedureEntry(
            id=d["id"], pseudo_paths=d["pseudo_paths"],
            sampled_indices=d["sampled_indices"], timestamps=d["timestamps"],
            source=d["source"], strategy=d["strategy"])
    return out


# ---------------------------------------------------------------------------
# codebook + embedder fitting


def fit_artifacts(data_dir: str | Path, pipe: PipelineConfig, d: int,
                  force: bool = False) -> Codebook:
    """Fit the codebook on train-split images and persist both blobs."""
    data_dir = Path(data_dir)
    cb_path, em_path = codebook_path(data_dir), embedder_path(data_dir)
    if (cb_path.exists() or em_path.exists()) and not force:
        raise ConfigError(f"{cb_path} exists; pass force to refit")
    manifest = read_manifest(data_dir, "train")
    frames = []
    for rec in manifest.records:
        frames.append(load_png(data_dir / rec.before_path))
        frames.append(load_png(data_dir / rec.after_path))
    book = fit_codebook(frames, pipe.K_cb, pipe.patch_size, pipe.embed_seed,
                        max_iter=pipe.codebook_iters,
                        max_patches=pipe.codebook_max_patches)
    save_codebook(book, cb_path)
    embedder = PatchEmbedder(pipe.patch_size, book.patch_dim, d, pipe.embed_seed)
    save_embedder(embedder, em_path)
    return book


def load_artifacts(data_dir: str | Path):
    return load_codebook(codebook_path(data_dir)), \
        load_embedder(embedder_path(data_dir))


# ---------------------------------------------------------------------------
# in-memory training sets


@dataclass
class Stage1Dataset:
    frames_u8: np.ndarray        # (N, k+2, H, W, 3) uint8
    embeds: np.ndarray           # (N, k+2, n_I, d) float32
    tokens: np.ndarray           # (N, (k+2)*n_I) int32
    caption_ids: np.ndarray      # (N, n_T) int64, padded
    captions: list[str]
    grid: tuple[int, int]        # patch grid (h, w)

    def __len__(self):
        return self.frames_u8.shape[0]


@dataclass
class Stage2Dataset:
    embeds: np.ndarray           # (N, 2, n_I, d) float32
    caption_ids: np.ndarray      # (N, n_T+1) int64 with BOS/EOS, padded
    captions: list[str]
    slots: list[dict]
    change_types: list[str]
    records: list[DatasetRecord]

    def __len__(self):
        return self.embeds.shape[0]


def pad_caption_ids(token_ids: list[int], max_text: int) -> np.ndarray:
    """BOS ... EOS right-padded to max_text + 1 positions."""
    if len(token_ids) > max_text + 1:
        raise ConfigError(
            f"caption length {len(token_ids)} exceeds max_text={max_text}")
    out = np.zeros(max_text + 1, dtype=np.int64)
    out[:len(token_ids)] = token_ids
    return out


def load_stage1_dataset(data_dir: str | Path, split: str, cfg: TrainConfig,
                        embedder: PatchEmbedder,
                        codebook: Codebook) -> Stage1Dataset:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir, split)
    procedures = read_procedures(data_dir, split)
    vocab = manifest.vocab
    frames_list, embeds_list, tokens_list, cap_ids, captions = [], [], [], [], []
    grid = None
    for rec in manifest.records:
        entry = procedures.get(rec.id)
        if entry is None:
            raise MissingArtifactError(f"no procedure entry for record {rec.id}")
        if len(entry.sampled_indices) != cfg.k:
            raise ConfigError(
                f"record {rec.id} has {len(entry.sampled_indices)} keyframes, "
                f"config expects k={cfg.k}")
        frames = [load_png(data_dir / rec.before_path)]
        frames += [load_png(data_dir / entry.pseudo_paths[i])
                   for i in entry.sampled_indices]
        frames.append(load_png(data_dir / rec.after_path))
        emb = embedder.embed_frames(frames)
        if grid is None:
            grid = embedder.embed(frames[0]).grid_shape
        frames_list.append(np.stack(
            [np.clip(np.rint(f * 255), 0, 255).astype(np.uint8) for f in frames]))
        embeds_list.append(emb)
        tokens_list.append(tokenize_frames(frames, codebook).astype(np.int32))
        words = rec.captions[0].split()
        cap_ids.append(pad_caption_ids(vocab.encode(words), cfg.max_text - 1))
        captions.append(rec.captions[0])
    n_i = embeds_list[0].shape[1]
    if n_i != cfg.n_I:
        raise ConfigError(f"embedder yields n_I={n_i}, config says {cfg.n_I}")
    return Stage1Dataset(
        frames_u8=np.stack(frames_list),
        embeds=np.stack(embeds_list).astype(np.float32),
        tokens=np.stack(tokens_list),
        caption_ids=np.stack(cap_ids),
        captions=captions,
        grid=grid,
    )


def load_stage2_dataset(data_dir: str | Path, split: str, cfg: TrainConfig,
                        embedder: PatchEmbedder) -> Stage2Dataset:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir, split)
    vocab = manifest.vocab
    embeds, cap_ids, captions, slots, ctypes = [], [], [], [], []
    for rec in manifest.records:
        before = load_png(data_dir / rec.before_path)
        after = load_png(data_dir / rec.after_path)
        embeds.append(embedder.embed_frames([before, after]))
        words = rec.captions[0].split()
        cap_ids.append(pad_caption_ids(vocab.encode(words), cfg.max_text))
        captions.append(rec.captions[0])
        slots.append(rec.slots)
        ctypes.append(rec.change_spec["change_type"])
    embeds = np.stack(embeds).astype(np.float32)
    if embeds.shape[2] != cfg.n_I:
        raise ConfigError(
            f"embedder yields n_I={embeds.shape[2]}, config says {cfg.n_I}")
    return Stage2Dataset(embeds=embeds, caption_ids=np.stack(cap_ids),
                         captions=captions, slots=slots, change_types=ctypes,
                         records=manifest.records)


# ---------------------------------------------------------------------------
# batch assembly


def derangement_partner(captions: list[str], idx: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray | None:
    """Partner index per sample, preferring a different caption text."""
    b = len(idx)
    if b < 2:
        return None
    base = int(rng.integers(1, b))
    partners = np.empty(b, dtype=np.int64)
    for i in range(b):
        for off in range(b - 1):
            j = (i + base + off) % b
            if j != i and captions[idx[j]] != captions[idx[i]]:
                partners[i] = j
                break
        else:
            partners[i] = (i + base) % b
    return partners


def build_stage1_batch(ds: Stage1Dataset, idx: np.ndarray,
                       rng_mask: np.random.Generator,
                       rng_neg: np.random.Generator,
                       embedder: PatchEmbedder,
                       dtype: torch.dtype = torch.float32) -> Stage1Batch:
    b = len(idx)
    gh, gw = ds.grid
    n_frames = ds.frames_u8.shape[1]

    flags = np.stack([
        sample_mask(rng_mask, n_frames, gh, gw).flags for _ in range(b)])

    partners = derangement_partner(ds.captions, idx, rng_neg)
    neg_text = None
    if partners is not None:
        neg_text = torch.from_numpy(ds.caption_ids[idx][partners])

    warped_embeds = np.empty_like(ds.embeds[idx])
    for row, i in enumerate(idx):
        frames = ds.frames_u8[i].astype(np.float32) / 255.0
        params = sample_warp_params(rng_neg, n_frames, batch_size=b)
        donor = None
        if params.strategy == "batch_swap":
            j = int(idx[(row + 1) % b])
            donor = ds.frames_u8[j][int(rng_neg.integers(0, n_frames))] \
                .astype(np.float32) / 255.0
        if params.strategy == "frame_shuffle":
            # embeddings permute with the frames; skip re-embedding
            warped_embeds[row] = ds.embeds[i][list(params.permutation)]
            continue
        warped = warp_negative(frames, params, donor)
        warped_embeds[row] = embedder.embed_frames(warped)

    d = ds.embeds.shape[-1]
    return Stage1Batch(
        text_ids=torch.from_numpy(ds.caption_ids[idx]),
        visual_embeds=torch.from_numpy(
            ds.embeds[idx].reshape(b, -1, d)).to(dtype),
        mask_flags=torch.from_numpy(flags),
        tokens=torch.from_numpy(ds.tokens[idx].astype(np.int64)),
        neg_text_ids=neg_text,
        warped_visual_embeds=torch.from_numpy(
            warped_embeds.reshape(b, -1, d)).to(dtype),
    )


def build_stage2_batch(ds: Stage2Dataset, idx: np.ndarray,
                       dtype: torch.dtype = torch.float32):
    embeds = torch.from_numpy(ds.embeds[idx]).to(dtype)
    gold = torch.from_numpy(ds.caption_ids[idx])
    return embeds[:, 0], embeds[:, 1], gold
