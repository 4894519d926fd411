"""Discrete patch tokenizer and frozen patch embedder.

The codebook is Lloyd k-means over all non-overlapping image patches and
supplies the integer reconstruction targets; a seeded, never-trained
linear projector supplies the continuous patch embeddings the encoders
consume. Both persist as little-endian float32 blobs with a one-line
text header.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingArtifactError


class CodebookError(ConfigError):
    """Codebook cannot be fit as requested."""


def extract_patches(frame: np.ndarray, patch_size: int) -> np.ndarray:
    """Non-overlapping patches, row-major, flattened to (n_I, patch_dim)."""
    h, w, c = frame.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"frame {frame.shape} not divisible by patch {p}")
    gh, gw = h // p, w // p
    patches = frame.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4)
    return patches.reshape(gh * gw, p * p * c)


def assemble_patches(patches: np.ndarray, patch_size: int,
                     image_size: int) -> np.ndarray:
    """Inverse of extract_patches for a square image."""
    p = patch_size
    g = image_size // p
    c = patches.shape[1] // (p * p)
    grid = patches.reshape(g, g, p, p, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape(image_size, image_size, c)


@dataclass
class Codebook:
    entries: np.ndarray          # (K_cb, patch_dim) float32
    patch_size: int
    fit_seed: int
    quant_error_bound: float = 0.0
    inertia_log: list[float] = field(default_factory=list)

    @property
    def K_cb(self) -> int:
        return int(self.entries.shape[0])

    @property
    def patch_dim(self) -> int:
        return int(self.entries.shape[1])


def _assign(patches: np.ndarray, centers: np.ndarray,
            chunk: int = 8192) -> tuple[np.ndarray, float]:
    """Nearest center per patch (ties to the lowest id) and total inertia."""
    n = patches.shape[0]
    ids = np.empty(n, dtype=np.int32)
    inertia = 0.0
    c_sq = (centers ** 2).sum(axis=1)
    for s in range(0, n, chunk):
        block = patches[s:s + chunk]
        d2 = (block ** 2).sum(axis=1)[:, None] - 2.0 * block @ centers.T + c_sq[None, :]
        np.maximum(d2, 0.0, out=d2)
        ids[s:s + chunk] = np.argmin(d2, axis=1)
        inertia += float(d2[np.arange(len(block)), ids[s:s + chunk]].sum())
    return ids, inertia


def fit_codebook(frames, K_cb: int, patch_size: int, seed: int,
                 max_iter: int = 40, max_patches: int = 0) -> Codebook:
    """Lloyd k-means over the patch corpus, deterministic for a fixed seed."""
    patches = np.concatenate(
        [extract_patches(np.asarray(f, dtype=np.float32), patch_size)
         for f in frames], axis=0)
    rng = np.random.default_rng(seed)
    if max_patches and patches.shape[0] > max_patches:
        keep = rng.choice(patches.shape[0], size=max_patches, replace=False)
        patches = patches[np.sort(keep)]

    distinct = np.unique(patches, axis=0)
    if distinct.shape[0] < K_cb:
        raise CodebookError(
            f"only {distinct.shape[0]} distinct patches in the corpus; "
            f"reduce K_cb below that (requested {K_cb})")

    init = rng.choice(distinct.shape[0], size=K_cb, replace=False)
    centers = distinct[np.sort(init)].copy()

    inertia_log = []
    prev_ids = None
    for _ in range(max_iter):
        ids, inertia = _assign(patches, centers)
        inertia_log.append(inertia / patches.shape[0])
        if prev_ids is not None and np.array_equal(ids, prev_ids):
            break
        prev_ids = ids
        for j in range(K_cb):
            members = patches[ids == j]
            if len(members):
                centers[j] = members.mean(axis=0)

    book = Codebook(entries=centers.astype(np.float32), patch_size=patch_size,
                    fit_seed=seed, inertia_log=inertia_log)

    # corpus bound: worst per-frame mean absolute pixel error at fit time
    worst = 0.0
    for f in frames:
        f = np.asarray(f, dtype=np.float32)
        rec = decode(tokenize(f, book), book, f.shape[0])
        worst = max(worst, float(np.abs(rec - f).mean()))
    book.quant_error_bound = worst
    return book


def tokenize(frame: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Per-patch nearest codebook ids for one frame."""
    patches = extract_patches(np.asarray(frame, dtype=np.float32),
                              codebook.patch_size)
    if patches.shape[1] != codebook.patch_dim:
        raise ValueError(
            f"patch dim {patches.shape[1]} vs codebook {codebook.patch_dim}")
    ids, _ = _assign(patches, codebook.entries)
    return ids


def tokenize_frames(frames, codebook: Codebook) -> np.ndarray:
    """Tokens for an ordered frame sequence, concatenated."""
    return np.concatenate([tokenize(f, codebook) for f in frames])


def decode(tokens: np.ndarray, codebook: Codebook, image_size: int) -> np.ndarray:
    return assemble_patches(codebook.entries[np.asarray(tokens, dtype=np.int64)],
                            codebook.patch_size, image_size)


# ---------------------------------------------------------------------------
# frozen patch embedder


@dataclass
class PatchEmbedding:
    vectors: np.ndarray        # (n_I, d)
    grid_shape: tuple[int, int]


class PatchEmbedder:
    """Seeded linear projection of flattened patches; never trained.

    Channel 0 additionally carries a fixed per-patch positional ramp so
    identical patches at different locations stay distinguishable before
    any learned positional information is added downstream.
    """

    def __init__(self, patch_size: int, patch_dim: int, dim: int, seed: int):
        rng = np.random.default_rng(seed)
        self.patch_size = patch_size
        self.dim = dim
        self.seed = seed
        self.weight = (rng.standard_normal((dim, patch_dim))
                       / np.sqrt(patch_dim)).astype(np.float32)
        self.bias = (0.01 * rng.standard_normal(dim)).astype(np.float32)

    @property
    def patch_dim(self) -> int:
        return int(self.weight.shape[1])

    def embed(self, frame: np.ndarray) -> PatchEmbedding:
        patches = extract_patches(np.asarray(frame, dtype=np.float32),
                                  self.patch_size)
        if patches.shape[1] != self.patch_dim:
            raise ValueError("frame incompatible with embedder patch size")
        out = patches @ self.weight.T + self.bias
        n = out.shape[0]
        out[:, 0] += np.arange(n, dtype=np.float32) / n
        g = int(np.sqrt(n))
        return PatchEmbedding(vectors=out, grid_shape=(g, g))

    def embed_frames(self, frames) -> np.ndarray:
        """(T, n_I, d) embeddings for an ordered frame sequence."""
        return np.stack([self.embed(f).vectors for f in frames])

    def params_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.weight.tobytes())
        h.update(self.bias.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# blob persistence: one text header line, then raw little-endian float32


def _write_blob(path: Path, header: dict, arrays: list[np.ndarray]) -> None:
    meta = " ".join(f"{k}={v}" for k, v in header.items())
    with open(path, "wb") as fh:
        fh.write((meta + "\n").encode("ascii"))
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(path: Path) -> tuple[dict, np.ndarray]:
    if not Path(path).exists():
        raise MissingArtifactError(f"blob not found: {path}")
    with open(path, "rb") as fh:
        header_line = fh.readline().decode("ascii").strip()
        raw = fh.read()
    header = {}
    for item in header_line.split():
        key, value = item.split("=", 1)
        header[key] = value
    data = np.frombuffer(raw, dtype="<f4")
    return header, data


def save_codebook(codebook: Codebook, path: str | Path) -> None:
    _write_blob(Path(path),
                {"K_cb": codebook.K_cb, "patch_dim": codebook.patch_dim,
                 "seed": codebook.fit_seed,
                 "patch_size": codebook.patch_size,
                 "quant_error_bound": f"{codebook.quant_error_bound:.8f}"},
                [codebook.entries])


def load_codebook(path: str | Path) -> Codebook:
    header, data = _read_blob(Path(path))
    K, pd = int(header["K_cb"]), int(header["patch_dim"])
    entries = data[:K * pd].reshape(K, pd).copy()
    return Codebook(entries=entries, patch_size=int(header["patch_size"]),
                    fit_seed=int(header["seed"]),
                    quant_error_bound=float(header.get("quant_error_bound", 0.0)))


def save_embedder(embedder: PatchEmbedder, path: str | Path) -> None:
    _write_blob(Path(path),
                {"dim": embedder.dim, "patch_dim": embedder.patch_dim,
                 "seed": embedder.seed, "patch_size": embedder.patch_size},
                [embedder.weight, embedder.bias])


def load_embedder(path: str | Path) -> PatchEmbedder:
    header, data = _read_blob(Path(path))
    dim, pd = int(header["dim"]), int(header["patch_dim"])
    emb = PatchEmbedder(int(header["patch_size"]), pd, dim, int(header["seed"]))
    emb.weight = data[:dim * pd].reshape(dim, pd).copy()
    emb.bias = data[dim * pd:dim * pd + dim].copy()
    return emb
