"""Two-stage optimization driver with reproducible seeding.

Stage 1 pretrains the procedure encoder on masked token reconstruction
plus the two discrimination terms; stage 2 trains the caption model end
to end, optionally initialized from a stage-1 checkpoint. All
randomness comes from named, independently seeded streams (data order,
masking, negatives) whose states are checkpointed, so a resumed run
reproduces the uninterrupted trajectory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .captioner import CaptionModel, ids_to_words
from .config import TrainConfig, build_config, config_to_text, read_config_file
from .data import (Stage1Dataset, Stage2Dataset, build_stage1_batch,
                   build_stage2_batch, load_artifacts, load_stage1_dataset,
                   load_stage2_dataset)
from .errors import ConfigError, MissingArtifactError
from .procnet import ProcedureEncoder, stage1_loss
from .synthdata import read_manifest


def lr_at(step: int, cfg: TrainConfig, total_steps: int = 0):
    """Piecewise-linear warmup, then flat. Stage 2 returns (enc, dec)."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    if cfg.stage == 1:
        w = max(cfg.warmup_steps, 1)
        frac = min(step, w) / w
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac
    w = max(int(round(cfg.warmup_frac * total_steps)), 1)
    dec = cfg.dec_lr * min(step, w) / w
    return cfg.enc_lr, dec


def param_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().astype(np.float32).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints: directory of named little-endian float32 arrays plus state


@dataclass
class RngBundle:
    data: np.random.Generator
    mask: np.random.Generator
    neg: np.random.Generator

    @classmethod
    def seeded(cls, seed: int) -> "RngBundle":
        ss = np.random.SeedSequence(seed)
        children = ss.spawn(3)
        return cls(*(np.random.default_rng(c) for c in children))

    def state(self) -> dict:
        return {
            "data": self.data.bit_generator.state,
            "mask": self.mask.bit_generator.state,
            "neg": self.neg.bit_generator.state,
        }

    def restore(self, state: dict) -> None:
        self.data.bit_generator.state = state["data"]
        self.mask.bit_generator.state = state["mask"]
        self.neg.bit_generator.state = state["neg"]


def copy_support_artifacts(ckpt_dir: Path, data_dir: str | Path) -> None:
    """Make the checkpoint self-contained for later captioning."""
    import shutil

    data_dir = Path(data_dir)
    for name in ("vocab.txt", "embedder.blob"):
        src = data_dir / name
        if src.exists():
            shutil.copyfile(src, ckpt_dir / name)


def save_checkpoint(ckpt_dir: str | Path, model: torch.nn.Module,
                    optimizer: torch.optim.Optimizer, cfg: TrainConfig,
                    rngs: RngBundle, meta: dict) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    params = {name: t.detach().cpu().numpy().astype("<f4")
              for name, t in model.state_dict().items()}
    np.savez(ckpt_dir / "params.npz", **params)

    opt_arrays = {}
    opt_state = optimizer.state_dict()
    for pid, st in opt_state["state"].items():
        for key, value in st.items():
            if isinstance(value, torch.Tensor):
                opt_arrays[f"{pid}.{key}"] = \
                    value.detach().cpu().numpy().astype("<f4")
            else:
                opt_arrays[f"{pid}.{key}"] = np.asarray(value, dtype="<f4")
    np.savez(ckpt_dir / "optim.npz", **opt_arrays)
    np.save(ckpt_dir / "torch_rng.npy",
            torch.get_rng_state().numpy().astype(np.uint8))
    (ckpt_dir / "rng.json").write_text(
        json.dumps(rngs.state(), default=int), encoding="utf-8")
    (ckpt_dir / "meta.json").write_text(
        json.dumps(meta, sort_keys=True), encoding="utf-8")
    (ckpt_dir / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")


def read_checkpoint_config(ckpt_dir: str | Path) -> TrainConfig:
    path = Path(ckpt_dir) / "config.txt"
    if not path.exists():
        raise MissingArtifactError(f"checkpoint config missing: {path}")
    return build_config(TrainConfig, read_config_file(path))


def load_params(ckpt_dir: str | Path) -> dict[str, np.ndarray]:
    path = Path(ckpt_dir) / "params.npz"
    if not path.exists():
        raise MissingArtifactError(f"checkpoint params missing: {path}")
    with np.load(path) as npz:
        return {k: npz[k].copy() for k in npz.files}


def load_model_state(model: torch.nn.Module, ckpt_dir: str | Path,
                     prefix_map=None) -> None:
    arrays = load_params(ckpt_dir)
    state = model.state_dict()
    dtype = next(iter(state.values())).dtype
    for name in state:
        source = prefix_map(name) if prefix_map else name
        if source not in arrays:
            raise ConfigError(f"checkpoint missing parameter {source}")
        arr = arrays[source]
        if tuple(arr.shape) != tuple(state[name].shape):
            raise ConfigError(
                f"shape mismatch for {name}: ckpt {arr.shape} "
                f"vs model {tuple(state[name].shape)}")
        state[name] = torch.from_numpy(arr).to(dtype)
    model.load_state_dict(state)


def restore_optimizer(optimizer: torch.optim.Optimizer,
                      ckpt_dir: str | Path) -> None:
    path = Path(ckpt_dir) / "optim.npz"
    if not path.exists():
        raise MissingArtifactError(f"optimizer state missing: {path}")
    with np.load(path) as npz:
        grouped: dict[int, dict] = {}
        for key in npz.files:
            pid, field = key.split(".", 1)
            grouped.setdefault(int(pid), {})[field] = npz[key].copy()
    state_dict = optimizer.state_dict()
    new_state = {}
    for pid, fields in grouped.items():
        entry = {}
        for field, arr in fields.items():
            if field == "step":
                entry[field] = torch.tensor(float(arr))
            else:
                entry[field] = torch.from_numpy(arr)
        new_state[pid] = entry
    state_dict["state"] = new_state
    optimizer.load_state_dict(state_dict)


def restore_rngs(ckpt_dir: str | Path, rngs: RngBundle) -> dict:
    ckpt_dir = Path(ckpt_dir)
    rngs.restore(json.loads((ckpt_dir / "rng.json").read_text(encoding="utf-8")))
    torch.set_rng_state(torch.from_numpy(
        np.load(ckpt_dir / "torch_rng.npy")).to(torch.uint8))
    return json.loads((ckpt_dir / "meta.json").read_text(encoding="utf-8"))


def append_log(log_path: Path, entry: dict) -> None:
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stage 1


def prepare_stage1(data_dir: str | Path, cfg: TrainConfig):
    codebook, embedder = load_artifacts(data_dir)
    if embedder.dim != cfg.d:
        raise ConfigError(
            f"embedder dim {embedder.dim} != model d {cfg.d}; refit artifacts")
    if codebook.K_cb != cfg.K_cb:
        raise ConfigError(
            f"codebook K_cb {codebook.K_cb} != config K_cb {cfg.K_cb}")
    ds = load_stage1_dataset(data_dir, "train", cfg, embedder, codebook)
    return ds, codebook, embedder


def train_stage1(cfg: TrainConfig, data_dir: str | Path, out_dir: str | Path,
                 resume_from: str | Path | None = None,
                 dataset: Stage1Dataset | None = None,
                 embedder=None) -> Path:
    """Run stage-1 pretraining; returns the checkpoint directory."""
    cfg = _with_vocab(cfg, data_dir)
    cfg.stage = 1
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "log.jsonl"

    if dataset is None or embedder is None:
        dataset, _, embedder = prepare_stage1(data_dir, cfg)

    torch.manual_seed(cfg.seed)
    model = ProcedureEncoder(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_start)
    rngs = RngBundle.seeded(cfg.seed)
    start_step = 0
    if resume_from is not None:
        load_model_state(model, resume_from)
        restore_optimizer(optimizer, resume_from)
        meta = restore_rngs(resume_from, rngs)
        start_step = int(meta["step"])
        model.empty_mask_events = int(meta.get("empty_mask_events", 0))
        model.skipped_align_batches = int(meta.get("skipped_align_batches", 0))
    else:
        log_path.write_text("", encoding="utf-8")

    n = len(dataset)
    model.train()
    for step in range(start_step, cfg.steps):
        lr = lr_at(step, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        idx = rngs.data.integers(0, n, size=cfg.batch_size)
        batch = build_stage1_batch(dataset, idx, rngs.mask, rngs.neg, embedder)
        loss, terms = stage1_loss(model, batch, cfg.use_align, cfg.use_csy)
        optimizer.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        append_log(log_path, {"step": step, "lr": lr, **terms})
        if cfg.save_every and (step + 1) % cfg.save_every == 0 \
                and step + 1 < cfg.steps:
            save_checkpoint(out_dir, model, optimizer, cfg, rngs,
                            _meta(model, step=step + 1))
    save_checkpoint(out_dir, model, optimizer, cfg, rngs,
                    _meta(model, step=cfg.steps))
    copy_support_artifacts(out_dir, data_dir)
    return out_dir


def _meta(model, **extra) -> dict:
    return {
        "empty_mask_events": getattr(model, "empty_mask_events", 0),
        "skipped_align_batches": getattr(model, "skipped_align_batches", 0),
        **extra,
    }


def _with_vocab(cfg: TrainConfig, data_dir: str | Path) -> TrainConfig:
    if cfg.vocab_size == 0:
        manifest = read_manifest(data_dir, "val")
        cfg = TrainConfig(**{**cfg.__dict__, "vocab_size": len(manifest.vocab)})
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# stage 2


def init_encoder_from_stage1(model: CaptionModel, stage1_ckpt: str | Path):
    """Copy every stage-1 encoder parameter into the caption model."""
    arrays = load_params(stage1_ckpt)
    state = model.encoder.state_dict()
    for name in state:
        if name not in arrays:
            raise ConfigError(f"stage-1 checkpoint missing {name}")
        if tuple(arrays[name].shape) != tuple(state[name].shape):
            raise ConfigError(
                f"stage-1 shape mismatch for {name}: {arrays[name].shape} "
                f"vs {tuple(state[name].shape)}")
        state[name] = torch.from_numpy(arrays[name])
    model.encoder.load_state_dict(state)


@torch.no_grad()
def evaluate_stage2(model: CaptionModel, ds: Stage2Dataset, vocab,
                    batch_size: int = 64, max_pairs: int = 0):
    """Mean val loss plus greedy exact-match rate."""
    model.eval()
    n = len(ds) if not max_pairs else min(len(ds), max_pairs)
    total_loss, batches, hits = 0.0, 0, 0
    for s in range(0, n, batch_size):
        idx = np.arange(s, min(s + batch_size, n))
        before, after, gold = build_stage2_batch(ds, idx)
        memory = model.encode_pair(model.build_query_input(before, after))
        total_loss += float(model.caption_loss(memory, gold))
        batches += 1
        seqs, _ = model.generate(memory, mode="greedy")
        for row, i in enumerate(idx):
            text = " ".join(ids_to_words(seqs[row], vocab))
            hits += int(text == ds.captions[i])
    model.train()
    return total_loss / max(batches, 1), hits / max(n, 1)


def train_stage2(cfg: TrainConfig, data_dir: str | Path, out_dir: str | Path,
                 stage1_ckpt: str | Path | None = None,
                 resume_from: str | Path | None = None,
                 dataset: Stage2Dataset | None = None,
                 val_dataset: Stage2Dataset | None = None) -> Path:
    """Run stage-2 captioning training; returns the checkpoint directory."""
    cfg = _with_vocab(cfg, data_dir)
    cfg.stage = 2
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "log.jsonl"

    _, embedder = load_artifacts(data_dir)
    if embedder.dim != cfg.d:
        raise ConfigError(
            f"embedder dim {embedder.dim} != model d {cfg.d}; refit artifacts")
    if dataset is None:
        dataset = load_stage2_dataset(data_dir, "train", cfg, embedder)
    if val_dataset is None:
        val_dataset = load_stage2_dataset(data_dir, "val", cfg, embedder)
    vocab = read_manifest(data_dir, "val").vocab

    torch.manual_seed(cfg.seed)
    model = CaptionModel(cfg)
    if stage1_ckpt is not None:
        init_encoder_from_stage1(model, stage1_ckpt)
    if cfg.freeze_queries:
        model.encoder.mask_embedding.requires_grad_(False)

    enc_params = [p for p in model.encoder.parameters() if p.requires_grad]
    dec_params = list(model.decoder.parameters())
    optimizer = torch.optim.Adam([
        {"params": enc_params, "lr": cfg.enc_lr},
        {"params": dec_params, "lr": cfg.dec_lr},
    ])
    rngs = RngBundle.seeded(cfg.seed)

    n = len(dataset)
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs

    start_epoch = 0
    step = 0
    if resume_from is not None:
        load_model_state(model, resume_from)
        restore_optimizer(optimizer, resume_from)
        meta = restore_rngs(resume_from, rngs)
        start_epoch = int(meta["epoch"])
        step = int(meta["step"])
    else:
        log_path.write_text("", encoding="utf-8")

    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        order = rngs.data.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            enc_lr, dec_lr = lr_at(step, cfg, total_steps)
            optimizer.param_groups[0]["lr"] = enc_lr
            optimizer.param_groups[1]["lr"] = dec_lr
            before, after, gold = build_stage2_batch(dataset, idx)
            memory = model.encode_pair(model.build_query_input(before, after))
            loss = model.caption_loss(memory, gold)
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            append_log(log_path, {
                "epoch": epoch, "step": step, "lr_enc": enc_lr,
                "lr_dec": dec_lr, "loss": float(loss.detach())})
            step += 1
        val_loss, exact = evaluate_stage2(model, val_dataset, vocab)
        append_log(log_path, {"epoch": epoch, "step": step,
                              "val_loss": val_loss, "val_exact_match": exact})
        save_checkpoint(out_dir, model, optimizer, cfg, rngs,
                        {"epoch": epoch + 1, "step": step})
    copy_support_artifacts(out_dir, data_dir)
    return out_dir


def load_caption_model(ckpt_dir: str | Path) -> tuple[CaptionModel, TrainConfig]:
    cfg = read_checkpoint_config(ckpt_dir)
    model = CaptionModel(cfg)
    load_model_state(model, ckpt_dir)
    model.eval()
    return model, cfg
