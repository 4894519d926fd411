"""Synthetic grid-world change-captioning dataset.

Scenes are flat-shaded shapes on a uniform background, one object per
grid cell. A record is a before/after image pair, a template caption and
the structured change behind it. The generator doubles as a ground-truth
engine: ``frame_at`` renders the scene at any point of the continuous
transition, which gives exact intermediate frames for testing the
interpolation and sampling stages.

Everything here is a pure function of (seed, config).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DataConfig, config_hash, config_to_text
from .errors import ConfigError, InfeasibleChangeError, PlacementError

SHAPES = ("square", "circle", "triangle")
SIZES = ("small", "large")
COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.85),
}
COLOR_NAMES = tuple(COLORS)
BACKGROUND = (0.20, 0.20, 0.20)

DIRECTIONS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}
_DIR_BY_STEP = {v: k for k, v in DIRECTIONS.items()}

CHANGE_TYPES = ("color", "move", "add", "drop", "none")
DISTRACTORS = ("none", "viewpoint_shift", "illumination_shift")

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    size: str
    position: tuple[int, int]   # (row, col) grid cell
    exists: bool = True

    def attributes(self) -> tuple[str, str, str]:
        return (self.size, self.color, self.shape)


@dataclass(frozen=True)
class SceneState:
    objects: tuple[ObjectSpec, ...]
    canvas_size: tuple[int, int]
    grid: int
    illumination: float = 1.0
    global_offset: tuple[int, int] = (0, 0)   # (dy, dx) pixels

    def occupied_cells(self) -> set[tuple[int, int]]:
        return {o.position for o in self.objects if o.exists}


@dataclass(frozen=True)
class ChangeSpec:
    change_type: str
    target_index: int = -1
    new_value: object = None          # type-dependent payload
    distractor: str = "none"
    distractor_value: object = None   # (dy, dx) or illumination factor

    def validate(self, scene: SceneState) -> None:
        if self.change_type not in CHANGE_TYPES:
            raise InfeasibleChangeError(f"unknown change type {self.change_type}")
        if self.distractor not in DISTRACTORS:
            raise InfeasibleChangeError(f"unknown distractor {self.distractor}")
        if self.change_type == "none" and self.distractor == "none":
            raise InfeasibleChangeError("a no-change pair requires a distractor")
        if self.change_type in ("color", "move", "drop"):
            if not (0 <= self.target_index < len(scene.objects)):
                raise InfeasibleChangeError(f"target {self.target_index} out of range")


@dataclass(frozen=True)
class Slots:
    """Parsed caption content: what changed, described how."""

    change_type: str
    size: str | None = None
    color: str | None = None
    shape: str | None = None
    direction: str | None = None
    new_color: str | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class Caption:
    surface: list[str]
    token_ids: list[int]
    slots: Slots

    @property
    def text(self) -> str:
        return " ".join(self.surface)


# ---------------------------------------------------------------------------
# grammar


class Grammar:
    """Template grammar for change captions; bijective on slots."""

    def caption_words(self, slots: Slots) -> list[str]:
        s = slots
        if s.change_type == "none":
            return "the scene remains the same".split()
        attrs = [s.size, s.color, s.shape]
        if s.change_type == "color":
            return ["the", *attrs, "turned", s.new_color]
        if s.change_type == "move":
            return ["the", *attrs, "moved", s.direction]
        if s.change_type == "add":
            return ["a", *attrs, "has", "appeared"]
        if s.change_type == "drop":
            return ["the", *attrs, "has", "disappeared"]
        raise InfeasibleChangeError(f"no template for {s.change_type}")

    def parse(self, words: list[str] | str) -> Slots | None:
        """Invert a caption back to slots; None when not in the grammar."""
        if isinstance(words, str):
            words = words.split()
        if words == "the scene remains the same".split():
            return Slots("none")
        if len(words) == 6 and words[0] in ("the", "a"):
            size, color, shape = words[1], words[2], words[3]
            if size not in SIZES or color not in COLORS or shape not in SHAPES:
                return None
            verb, tail = words[4], words[5]
            if words[0] == "the" and verb == "turned" and tail in COLORS:
                return Slots("color", size, color, shape, new_color=tail)
            if words[0] == "the" and verb == "moved" and tail in DIRECTIONS:
                return Slots("move", size, color, shape, direction=tail)
            if words[0] == "a" and verb == "has" and tail == "appeared":
                return Slots("add", size, color, shape)
            if words[0] == "the" and verb == "has" and tail == "disappeared":
                return Slots("drop", size, color, shape)
        return None

    def vocabulary_words(self) -> list[str]:
        """Every surface word the grammar can emit, sorted."""
        words = set("the scene remains the same".split())
        words.update(("a", "turned", "moved", "has", "appeared", "disappeared"))
        words.update(SIZES)
        words.update(COLORS)
        words.update(SHAPES)
        words.update(DIRECTIONS)
        return sorted(words)


class Vocabulary:
    """Word<->id map with the four reserved ids in front."""

    def __init__(self, words: list[str]):
        self.id_to_word = list(RESERVED_TOKENS) + list(words)
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}

    def __len__(self) -> int:
        return len(self.id_to_word)

    def encode(self, words: list[str]) -> list[int]:
        ids = [self.word_to_id.get(w, UNK) for w in words]
        return [BOS] + ids + [EOS]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.id_to_word[i] if 0 <= i < len(self.id_to_word) else "<unk>")
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_word) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[: len(RESERVED_TOKENS)] != list(RESERVED_TOKENS):
            raise ConfigError(f"vocabulary {path} missing reserved token header")
        return cls(lines[len(RESERVED_TOKENS):])


def default_vocabulary() -> Vocabulary:
    return Vocabulary(Grammar().vocabulary_words())


def slots_of(change: ChangeSpec, scene: SceneState) -> Slots:
    """Describe a change as caption slots."""
    if change.change_type == "none":
        return Slots("none")
    if change.change_type == "add":
        obj: ObjectSpec = change.new_value
        return Slots("add", *obj.attributes())
    target = scene.objects[change.target_index]
    size, color, shape = target.attributes()
    if change.change_type == "drop":
        return Slots("drop", size, color, shape)
    if change.change_type == "color":
        return Slots("color", size, color, shape, new_color=change.new_value)
    if change.change_type == "move":
        step = tuple(change.new_value)
        direction = _DIR_BY_STEP.get(step)
        if direction is None:
            raise InfeasibleChangeError(f"move step {step} has no direction word")
        return Slots("move", size, color, shape, direction=direction)
    raise InfeasibleChangeError(change.change_type)


def caption_of(change: ChangeSpec, scene: SceneState, grammar: Grammar,
               vocab: Vocabulary | None = None) -> Caption:
    slots = slots_of(change, scene)
    words = grammar.caption_words(slots)
    vocab = vocab or default_vocabulary()
    return Caption(surface=words, token_ids=vocab.encode(words), slots=slots)


# ---------------------------------------------------------------------------
# scene generation and editing


def generate_scene(seed: int, cfg: DataConfig) -> SceneState:
    """Deterministic scene draw for one seed."""
    cfg.validate()
    rng = np.random.default_rng([int(seed), 0xC0FFEE])
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    cells = [(r, c) for r in range(cfg.grid) for c in range(cfg.grid)]
    chosen = rng.choice(len(cells), size=n, replace=False)

    combos = [(sh, co, si) for sh in SHAPES for co in COLOR_NAMES for si in SIZES]
    if cfg.unique_attributes:
        if n > len(combos):
            raise PlacementError(f"not enough attribute combinations for {n} objects")
        picks = rng.choice(len(combos), size=n, replace=False)
    else:
        picks = rng.integers(0, len(combos), size=n)

    objects = []
    for cell_i, combo_i in zip(chosen, picks):
        shape, color, size = combos[int(combo_i)]
        objects.append(ObjectSpec(shape, color, size, cells[int(cell_i)]))
    return SceneState(tuple(objects), (cfg.canvas, cfg.canvas), cfg.grid)


def feasible_changes(scene: SceneState, cfg: DataConfig,
                     rng: np.random.Generator) -> list[ChangeSpec]:
    """All concrete single-attribute edits applicable to the scene."""
    out: list[ChangeSpec] = []
    occupied = scene.occupied_cells()
    live = [(i, o) for i, o in enumerate(scene.objects) if o.exists]
    for i, obj in live:
        for new_color in COLOR_NAMES:
            if new_color != obj.color:
                out.append(ChangeSpec("color", i, new_color))
        out.append(ChangeSpec("drop", i))
        for step in DIRECTIONS.values():
            dest = (obj.position[0] + step[0], obj.position[1] + step[1])
            if 0 <= dest[0] < scene.grid and 0 <= dest[1] < scene.grid \
                    and dest not in occupied:
                out.append(ChangeSpec("move", i, step))
    free = [(r, c) for r in range(scene.grid) for c in range(scene.grid)
            if (r, c) not in occupied]
    if free:
        used = {o.attributes() for o in scene.objects if o.exists}
        combos = [(sh, co, si) for sh in SHAPES for co in COLOR_NAMES for si in SIZES
                  if not (cfg.unique_attributes and (si, co, sh) in used)]
        if combos:
            cell = free[int(rng.integers(0, len(free)))]
            sh, co, si = combos[int(rng.integers(0, len(combos)))]
            out.append(ChangeSpec("add", -1, ObjectSpec(sh, co, si, cell)))
    return out


def sample_change(scene: SceneState, seed: int, cfg: DataConfig) -> ChangeSpec:
    """Draw one change spec (possibly distractor-only) for the scene."""
    rng = np.random.default_rng([int(seed), 0xD1CE])
    no_change = rng.random() < cfg.p_no_change
    with_distractor = no_change or rng.random() < cfg.p_distractor

    distractor, payload = "none", None
    if with_distractor:
        if rng.random() < 0.5:
            distractor = "viewpoint_shift"
            while True:
                dy, dx = rng.integers(-cfg.max_offset, cfg.max_offset + 1, size=2)
                if dy or dx:
                    break
            payload = (int(dy), int(dx))
        else:
            distractor = "illumination_shift"
            payload = float(rng.uniform(cfg.illum_low, cfg.illum_high))

    if no_change:
        return ChangeSpec("none", distractor=distractor, distractor_value=payload)

    options = feasible_changes(scene, cfg, rng)
    if not options:
        return ChangeSpec("none", distractor=distractor or "viewpoint_shift",
                          distractor_value=payload or (1, 0))
    pick = options[int(rng.integers(0, len(options)))]
    return replace(pick, distractor=distractor, distractor_value=payload)


def apply_change(scene: SceneState, change: ChangeSpec) -> SceneState:
    """Produce the after-scene; only the targeted attribute differs."""
    change.validate(scene)
    objects = list(scene.objects)
    occupied = scene.occupied_cells()

    if change.change_type == "color":
        target = objects[change.target_index]
        if change.new_value not in COLORS:
            raise InfeasibleChangeError(f"unknown color {change.new_value}")
        objects[change.target_index] = replace(target, color=change.new_value)
    elif change.change_type == "drop":
        target = objects[change.target_index]
        if not target.exists:
            raise InfeasibleChangeError("cannot drop a non-existent object")
        objects[change.target_index] = replace(target, exists=False)
    elif change.change_type == "move":
        target = objects[change.target_index]
        step = tuple(change.new_value)
        dest = (target.position[0] + step[0], target.position[1] + step[1])
        if not (0 <= dest[0] < scene.grid and 0 <= dest[1] < scene.grid):
            raise InfeasibleChangeError(f"move to {dest} leaves the grid")
        if dest in occupied:
            raise InfeasibleChangeError(f"cell {dest} already occupied")
        objects[change.target_index] = replace(target, position=dest)
    elif change.change_type == "add":
        obj: ObjectSpec = change.new_value
        if obj.position in occupied:
            raise InfeasibleChangeError(f"cell {obj.position} already occupied")
        objects.append(replace(obj, exists=True))
    elif change.change_type != "none":
        raise InfeasibleChangeError(change.change_type)

    illumination = scene.illumination
    offset = scene.global_offset
    if change.distractor == "viewpoint_shift":
        dy, dx = change.distractor_value
        offset = (scene.global_offset[0] + int(dy), scene.global_offset[1] + int(dx))
    elif change.distractor == "illumination_shift":
        illumination = float(change.distractor_value)

    return SceneState(tuple(objects), scene.canvas_size, scene.grid,
                      illumination, offset)


# ---------------------------------------------------------------------------
# rendering


def _object_radius(size: str, cell_px: float) -> float:
    return 0.42 * cell_px if size == "large" else 0.26 * cell_px


def _shape_mask(shape: str, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= 0.5 * (dy + r))
    raise ConfigError(f"unknown shape {shape}")


def _render_primitives(prims, image_size: int, illumination: float) -> np.ndarray:
    """Composite (cy, cx, shape, radius, rgb, alpha) primitives over background."""
    img = np.empty((image_size, image_size, 3), dtype=np.float64)
    img[:] = BACKGROUND
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    yy = yy + 0.5
    xx = xx + 0.5
    for cy, cx, shape, r, rgb, alpha in prims:
        if alpha <= 0.0:
            continue
        mask = _shape_mask(shape, yy - cy, xx - cx, r)
        if not mask.any():
            continue
        color = np.asarray(rgb, dtype=np.float64)
        img[mask] = img[mask] + alpha * (color - img[mask])
    img *= illumination
    np.clip(img, 0.0, 1.0, out=img)
    return img.astype(np.float32)


def _primitives(scene: SceneState, image_size: int, overrides: dict | None = None,
                offset_px: tuple[float, float] | None = None):
    """Object draw list; overrides map object index -> (center, rgb, alpha)."""
    cell_px = image_size / scene.grid
    dy, dx = offset_px if offset_px is not None else scene.global_offset
    prims = []
    for i, obj in enumerate(scene.objects):
        over = (overrides or {}).get(i, {})
        alpha = over.get("alpha", 1.0 if obj.exists else 0.0)
        if alpha <= 0.0:
            continue
        row, col = over.get("position", obj.position)
        cy = (row + 0.5) * cell_px + dy
        cx = (col + 0.5) * cell_px + dx
        rgb = over.get("rgb", COLORS[obj.color])
        prims.append((cy, cx, obj.shape, _object_radius(obj.size, cell_px), rgb, alpha))
    return prims


def render(scene: SceneState, image_size: int) -> np.ndarray:
    """Rasterize a scene to float RGB in [0, 1]."""
    prims = _primitives(scene, image_size)
    return _render_primitives(prims, image_size, scene.illumination)


def frame_at(scene_before: SceneState, change: ChangeSpec, t: float,
             image_size: int) -> np.ndarray:
    """Render the continuous transition at time t in [0, 1].

    Changed attributes interpolate linearly (position along the straight
    path, color as an RGB blend, add/drop as an alpha fade); distractors
    interpolate the global offset and illumination; everything else is
    pixel-identical to the endpoints.
    """
    change.validate(scene_before)
    t = float(t)
    overrides: dict[int, dict] = {}
    scene = scene_before

    if change.change_type == "color":
        old = np.asarray(COLORS[scene.objects[change.target_index].color])
        new = np.asarray(COLORS[change.new_value])
        overrides[change.target_index] = {"rgb": tuple((1 - t) * old + t * new)}
    elif change.change_type == "drop":
        overrides[change.target_index] = {"alpha": 1.0 - t}
    elif change.change_type == "move":
        obj = scene.objects[change.target_index]
        step = change.new_value
        overrides[change.target_index] = {
            "position": (obj.position[0] + t * step[0], obj.position[1] + t * step[1])
        }
    elif change.change_type == "add":
        obj: ObjectSpec = change.new_value
        scene = SceneState(scene.objects + (replace(obj, exists=True),),
                           scene.canvas_size, scene.grid,
                           scene.illumination, scene.global_offset)
        overrides[len(scene.objects) - 1] = {"alpha": t}

    illumination = scene_before.illumination
    offset = np.asarray(scene_before.global_offset, dtype=np.float64)
    if change.distractor == "viewpoint_shift":
        dy, dx = change.distractor_value
        offset = offset + t * np.asarray([dy, dx], dtype=np.float64)
    elif change.distractor == "illumination_shift":
        illumination = (1 - t) * illumination + t * float(change.distractor_value)

    prims = _primitives(scene, image_size, overrides, offset_px=tuple(offset))
    return _render_primitives(prims, image_size, illumination)


def oracle_procedure(scene_before: SceneState, change: ChangeSpec, l: int,
                     image_size: int):
    """Ground-truth l-frame transition at timestamps i/(l+1)."""
    from .interp import PseudoFrameSequence

    if l < 1:
        raise ConfigError(f"need l >= 1, got {l}")
    timestamps = [i / (l + 1) for i in range(1, l + 1)]
    frames = [frame_at(scene_before, change, t, image_size) for t in timestamps]
    return PseudoFrameSequence(frames=frames, timestamps=timestamps, source="oracle")


# ---------------------------------------------------------------------------
# serialization


def scene_to_dict(scene: SceneState) -> dict:
    return {
        "objects": [
            {"shape": o.shape, "color": o.color, "size": o.size,
             "position": list(o.position), "exists": o.exists}
            for o in scene.objects
        ],
        "canvas_size": list(scene.canvas_size),
        "grid": scene.grid,
        "illumination": scene.illumination,
        "global_offset": list(scene.global_offset),
    }


def scene_from_dict(d: dict) -> SceneState:
    objects = tuple(
        ObjectSpec(o["shape"], o["color"], o["size"], tuple(o["position"]),
                   o["exists"])
        for o in d["objects"]
    )
    return SceneState(objects, tuple(d["canvas_size"]), d["grid"],
                      d["illumination"], tuple(d["global_offset"]))


def change_to_dict(change: ChangeSpec) -> dict:
    new_value = change.new_value
    if isinstance(new_value, ObjectSpec):
        new_value = {"shape": new_value.shape, "color": new_value.color,
                     "size": new_value.size, "position": list(new_value.position)}
    elif isinstance(new_value, tuple):
        new_value = list(new_value)
    payload = change.distractor_value
    if isinstance(payload, tuple):
        payload = list(payload)
    return {
        "change_type": change.change_type,
        "target_index": change.target_index,
        "new_value": new_value,
        "distractor": change.distractor,
        "distractor_value": payload,
    }


def change_from_dict(d: dict) -> ChangeSpec:
    new_value = d["new_value"]
    if d["change_type"] == "add" and isinstance(new_value, dict):
        new_value = ObjectSpec(new_value["shape"], new_value["color"],
                               new_value["size"], tuple(new_value["position"]))
    elif d["change_type"] == "move" and isinstance(new_value, list):
        new_value = tuple(new_value)
    payload = d["distractor_value"]
    if isinstance(payload, list):
        payload = tuple(payload)
    return ChangeSpec(d["change_type"], d["target_index"], new_value,
                      d["distractor"], payload)


def save_png(frame: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


# ---------------------------------------------------------------------------
# dataset build


@dataclass
class DatasetRecord:
    id: int
    split: str
    before_path: str
    after_path: str
    captions: list[str]
    change_spec: dict
    seed: int
    slots: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    split: str
    records: list[DatasetRecord]
    vocab: Vocabulary
    config_hash: str


def _record_seed(cfg: DataConfig, index: int) -> int:
    return cfg.seed * 10_000_000 + index


def split_ranges(cfg: DataConfig) -> dict[str, range]:
    n = cfg.num_pairs
    n_train = int(round(n * cfg.train_frac))
    n_val = int(round(n * cfg.val_frac))
    return {
        "train": range(0, n_train),
        "val": range(n_train, n_train + n_val),
        "test": range(n_train + n_val, n),
    }


def make_record(cfg: DataConfig, index: int, grammar: Grammar,
                vocab: Vocabulary):
    """Build one record in memory: scenes, frames, caption."""
    seed = _record_seed(cfg, index)
    scene = generate_scene(seed, cfg)
    change = sample_change(scene, seed, cfg)
    after = apply_change(scene, change)
    caption = caption_of(change, scene, grammar, vocab)
    before_img = render(scene, cfg.canvas)
    after_img = render(after, cfg.canvas)
    return scene, change, after, caption, before_img, after_img, seed


def build_dataset(cfg: DataConfig, out_dir: str | Path,
                  force: bool = False) -> dict[str, DatasetManifest]:
    """Generate and persist the dataset; returns per-split manifests."""
    cfg.validate()
    out = Path(out_dir)
    marker = out / "config.cfg"
    if marker.exists() and not force:
        raise ConfigError(f"{out} already holds a dataset; pass force to rebuild")
    (out / "images").mkdir(parents=True, exist_ok=True)

    grammar = Grammar()
    vocab = default_vocabulary()
    vocab.save(out / "vocab.txt")
    marker.write_text(config_to_text(cfg), encoding="utf-8")
    chash = config_hash(cfg)

    manifests = {}
    for split, idx_range in split_ranges(cfg).items():
        records = []
        img_dir = out / "images" / split
        img_dir.mkdir(parents=True, exist_ok=True)
        for index in idx_range:
            scene, change, after, caption, before_img, after_img, seed = \
                make_record(cfg, index, grammar, vocab)
            before_rel = f"images/{split}/{index:06d}_before.png"
            after_rel = f"images/{split}/{index:06d}_after.png"
            save_png(before_img, out / before_rel)
            save_png(after_img, out / after_rel)
            records.append(DatasetRecord(
                id=index, split=split,
                before_path=before_rel, after_path=after_rel,
                captions=[caption.text],
                change_spec=change_to_dict(change),
                seed=seed,
                slots=caption.slots.to_dict(),
            ))
        manifest = DatasetManifest(split, records, vocab, chash)
        write_manifest(manifest, out / f"manifest.{split}.jsonl")
        manifests[split] = manifest
    return manifests


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = []
    for r in manifest.records:
        lines.append(json.dumps({
            "id": r.id,
            "split": r.split,
            "before_path": r.before_path,
            "after_path": r.after_path,
            "captions": r.captions,
            "change_spec": r.change_spec,
            "seed": r.seed,
            "slots": r.slots,
            "config_hash": manifest.config_hash,
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(data_dir: str | Path, split: str) -> DatasetManifest:
    from .errors import MissingArtifactError

    data_dir = Path(data_dir)
    path = data_dir / f"manifest.{split}.jsonl"
    if not path.exists():
        raise MissingArtifactError(f"manifest not found: {path}")
    records = []
    chash = ""
    for line in path.read_text(encoding="utf-8").splitlines():
        d = json.loads(line)
        chash = d.get("config_hash", "")
        records.append(DatasetRecord(
            id=d["id"], split=d["split"], before_path=d["before_path"],
            after_path=d["after_path"], captions=d["captions"],
            change_spec=d["change_spec"], seed=d["seed"],
            slots=d.get("slots", {}),
        ))
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    return DatasetManifest(split, records, vocab, chash)


def read_data_config(data_dir: str | Path) -> DataConfig:
    from .config import build_config, read_config_file

    return build_config(DataConfig, read_config_file(Path(data_dir) / "config.cfg"))
