"""Configuration dataclasses and the key=value config file format.

Config files are UTF-8 text, one ``key=value`` per line, ``#`` starts a
comment. CLI flags override file values, which override the dataclass
defaults below. See docs/configuration.md for the key reference.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class DataConfig:
    """Synthetic dataset generation parameters."""

    canvas: int = 32            # square image side, pixels
    grid: int = 4               # scene cells per side
    min_objects: int = 2
    max_objects: int = 4
    unique_attributes: bool = True   # distinct (shape, color, size) per scene
    p_no_change: float = 0.2         # distractor-only pair probability
    p_distractor: float = 0.5        # distractor alongside a real change
    max_offset: int = 2              # viewpoint shift magnitude, pixels
    illum_low: float = 0.7           # illumination distractor range
    illum_high: float = 1.3
    num_pairs: int = 5000
    train_frac: float = 0.8
    val_frac: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        from .errors import PlacementError

        if self.canvas % self.grid != 0:
            raise ConfigError(f"canvas {self.canvas} not divisible by grid {self.grid}")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.max_objects > self.grid * self.grid:
            raise PlacementError(
                f"grid {self.grid}x{self.grid} too small for {self.max_objects} objects"
            )
        if not (0.0 < self.train_frac and self.train_frac + self.val_frac < 1.0):
            raise ConfigError("split fractions must leave room for a test split")


@dataclass
class PipelineConfig:
    """Procedure generation, sampling and tokenization parameters."""

    l: int = 7                      # pseudo-frame count, 2**m - 1
    k: int = 2                      # sampled keyframes
    interpolator: str = "blend"     # blend | oracle
    blend_gate: bool = False        # difference-gated blend mask
    strategy: str = "visual_text"   # visual_only | visual_text
    scorer: str = "oracle"          # oracle | learned (visual_text backend)
    patch_size: int = 4
    K_cb: int = 256
    embed_seed: int = 7
    codebook_max_patches: int = 60000
    codebook_iters: int = 40

    def n_patches(self, canvas: int) -> int:
        if canvas % self.patch_size != 0:
            raise ConfigError(
                f"canvas {canvas} not divisible by patch size {self.patch_size}"
            )
        return (canvas // self.patch_size) ** 2


@dataclass
class TrainConfig:
    """Flat training configuration covering both stages.

    Model-size fields mirror the desk defaults; the learning-rate schedule
    fields default to the full-scale recipe (stage 1 warms up 1e-6 -> 1e-4
    over the first 5000 steps then stays flat; stage 2 trains the decoder
    with a 0 -> dec_lr warmup over the first warmup_frac of steps while the
    encoder uses a fixed rate).
    """

    stage: int = 1
    steps: int = 5000               # stage 1
    epochs: int = 20                # stage 2
    batch_size: int = 8
    seed: int = 0
    # stage-1 schedule
    lr_start: float = 1e-6
    lr_peak: float = 1e-4
    warmup_steps: int = 5000
    # stage-2 schedule
    enc_lr: float = 5e-5
    dec_lr: float = 5e-5
    warmup_frac: float = 0.1
    # loss-term toggles (stage 1)
    use_align: bool = True
    use_csy: bool = True
    # structure
    k: int = 2
    l: int = 7
    K_cb: int = 256
    n_I: int = 64
    d: int = 128
    l_e: int = 4
    l_d: int = 2
    heads: int = 8
    ffn_mult: int = 4
    dropout: float = 0.0
    max_text: int = 12
    max_frames: int = 16
    vocab_size: int = 0             # filled from the dataset vocabulary
    grad_clip: float = 1.0
    freeze_queries: bool = False
    save_every: int = 0             # 0 = final checkpoint only (stage 1)

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1 or self.steps < 1 or self.epochs < 1:
            raise ConfigError("counts must be positive")
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.k + 2 > self.max_frames:
            raise ConfigError("k+2 exceeds max_frames")


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: str, typ):
    if typ is bool:
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for type {typ.__name__}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    """Parse key=value lines into a raw string dict."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def build_config(cls, raw: dict[str, str], overrides: dict | None = None):
    """Instantiate a config dataclass from raw strings plus typed overrides.

    Unknown keys in ``raw`` are ignored (they may belong to another config
    section); unknown keys in ``overrides`` are an error.
    """
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key in known:
            kwargs[key] = _coerce(value, type(getattr(defaults, key)))
    if overrides:
        for key, value in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
            if value is not None:
                kwargs[key] = value
    return cls(**kwargs)


def config_to_text(cfg) -> str:
    """Serialize a config dataclass back to canonical key=value text."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def config_hash(*cfgs) -> str:
    """Stable short hash over one or more config dataclasses."""
    blob = "\n".join(config_to_text(c) for c in cfgs).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def asdict(cfg) -> dict:
    return dataclasses.asdict(cfg)
