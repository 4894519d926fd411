"""Pseudo-procedure synthesis between an image pair.

An interpolator produces the frame halfway between two frames; recursive
midpoint subdivision turns it into an l-frame sequence (l = 2**m - 1) at
uniform timestamps i/(l+1). The blend interpolator mixes the endpoints
through a soft per-pixel mask; the oracle interpolator re-renders the
generating scene at the midpoint time and is exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class PseudoFrameSequence:
    frames: list[np.ndarray]
    timestamps: list[float]
    source: str   # "blend" | "oracle"

    def __post_init__(self):
        if len(self.frames) != len(self.timestamps):
            raise ConfigError("frames/timestamps length mismatch")
        if any(t2 <= t1 for t1, t2 in zip(self.timestamps, self.timestamps[1:])):
            raise ConfigError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)


def blend_frame(before: np.ndarray, after: np.ndarray, mask: np.ndarray,
                residual: np.ndarray | None = None) -> np.ndarray:
    """Soft-mask mix: clamp(mask*before + (1-mask)*after + residual)."""
    if before.shape != after.shape:
        raise ValueError(f"shape mismatch: {before.shape} vs {after.shape}")
    mask = np.asarray(mask, dtype=before.dtype)
    if mask.ndim == 2 and before.ndim == 3:
        mask = mask[..., None]
    out = mask * before + (1.0 - mask) * after
    if residual is not None:
        if residual.shape != before.shape:
            raise ValueError("residual shape mismatch")
        out = out + residual
    return np.clip(out, 0.0, 1.0).astype(before.dtype)


class BlendInterpolator:
    """Identity-warp blend with a constant or difference-gated mask.

    With gating enabled the mask holds the before-pixel wherever the pair
    already agrees (|before - after| < threshold) and mixes 50/50 elsewhere.
    """

    name = "blend"

    def __init__(self, gate: bool = False, gate_threshold: float = 0.02):
        self.gate = gate
        self.gate_threshold = gate_threshold

    def midpoint(self, frame_a: np.ndarray, frame_b: np.ndarray,
                 t_a: float, t_b: float) -> np.ndarray:
        if self.gate:
            mask = np.where(np.abs(frame_a - frame_b) < self.gate_threshold, 1.0, 0.5)
        else:
            mask = np.full_like(frame_a, 0.5)
        return blend_frame(frame_a, frame_b, mask)


class OracleInterpolator:
    """Renders the generating scene at the midpoint time; synthdata-only."""

    name = "oracle"

    def __init__(self, scene_before, change, image_size: int):
        self.scene_before = scene_before
        self.change = change
        self.image_size = image_size

    def midpoint(self, frame_a: np.ndarray, frame_b: np.ndarray,
                 t_a: float, t_b: float) -> np.ndarray:
        from .synthdata import frame_at

        return frame_at(self.scene_before, self.change, 0.5 * (t_a + t_b),
                        self.image_size)


def _subdivide(interpolator, frame_a, frame_b, t_a, t_b, depth):
    if depth == 0:
        return []
    t_mid = 0.5 * (t_a + t_b)
    mid = interpolator.midpoint(frame_a, frame_b, t_a, t_b)
    left = _subdivide(interpolator, frame_a, mid, t_a, t_mid, depth - 1)
    right = _subdivide(interpolator, mid, frame_b, t_mid, t_b, depth - 1)
    return left + [(t_mid, mid)] + right


def generate_procedure(interpolator, before: np.ndarray, after: np.ndarray,
                       l: int) -> PseudoFrameSequence:
    """Recursive midpoint subdivision to l = 2**m - 1 interior frames."""
    if l < 1 or ((l + 1) & l) != 0:
        raise ConfigError(f"l must be 2**m - 1 for m >= 1, got {l}")
    if before.shape != after.shape:
        raise ValueError("endpoint shape mismatch")
    depth = (l + 1).bit_length() - 1
    items = _subdivide(interpolator, before, after, 0.0, 1.0, depth)
    timestamps = [t for t, _ in items]
    frames = [f for _, f in items]
    return PseudoFrameSequence(frames=frames, timestamps=timestamps,
                               source=interpolator.name)
