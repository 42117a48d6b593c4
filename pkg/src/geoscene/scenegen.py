"""Procedural two-view scenes with exact ground-truth correspondences.

A scene is a smooth background texture plus a few flat-coloured shapes
living in canonical pixel coordinates. The target view is the canonical
frame itself with one extra entity composited on top; the reference view
is the bare scene seen through a similarity transform. Because the
transform is known, matched points are exact.

Colours come from a fixed 12-entry palette; all objects of a scene and the
entity use distinct colours so they can be told apart by colour alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .correspondence import MatchSet, build_masks, gaussian_kernel, read_mask, write_mask, \
    read_matches, write_matches
from .errors import DataError, EncodingError, GenerationError, ParameterError, PlacementError

SHAPES = ("rectangle", "circle", "triangle")
PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 210, 40),
    "magenta": (205, 50, 205),
    "cyan": (40, 205, 215),
    "orange": (245, 135, 25),
    "purple": (115, 45, 175),
    "lime": (160, 230, 40),
    "pink": (250, 130, 175),
    "brown": (125, 70, 30),
    "navy": (20, 30, 105),
}
COLORS = tuple(PALETTE)
RELATIONS = ("left-of", "right-of", "above", "below", "on")
MAX_OBJECTS = 8

# condition token vocabulary: [shape | color | relation | anchor slot]
SHAPE_OFFSET = 0
COLOR_OFFSET = SHAPE_OFFSET + len(SHAPES)
RELATION_OFFSET = COLOR_OFFSET + len(COLORS)
ANCHOR_OFFSET = RELATION_OFFSET + len(RELATIONS)
VOCAB_SIZE = ANCHOR_OFFSET + MAX_OBJECTS
CONDITION_LENGTH = 4

ENTITY_ID = -2
BACKGROUND_ID = -1

__all__ = [
    "SceneObject", "SceneSpec", "ViewTransform", "EntitySpec", "PairConfig",
    "TrainingSample", "render_scene", "render_layers", "make_pair",
    "encode_condition", "decode_condition", "sample_scene", "sample_transform",
    "write_sample", "read_sample", "entity_footprint", "SHAPES", "COLORS",
    "RELATIONS", "PALETTE", "VOCAB_SIZE",
]


@dataclass
class SceneObject:
    shape: str
    color: str
    center: tuple
    size: float


@dataclass
class SceneSpec:
    seed: int
    height: int
    width: int
    base_color: tuple
    waves: list  # (channel, amplitude, fx, fy, phase)
    objects: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objs = [SceneObject(o["shape"], o["color"], tuple(o["center"]), o["size"])
                for o in d["objects"]]
        return cls(d["seed"], d["height"], d["width"], tuple(d["base_color"]),
                   [tuple(w) for w in d["waves"]], objs)


@dataclass
class ViewTransform:
    """Similarity transform taking canonical (target-view) pixel coordinates
    to the pixel coordinates of the rendered view: rotate by ``theta`` and
    scale by ``scale`` about ``origin``, then shift by ``(tx, ty)``."""

    theta: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    origin: tuple = (0.0, 0.0)

    def forward(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.theta), math.sin(self.theta)
        o = np.asarray(self.origin, dtype=np.float64)
        d = pts - o
        x = self.scale * (c * d[..., 0] - s * d[..., 1])
        y = self.scale * (s * d[..., 0] + c * d[..., 1])
        return np.stack([x, y], axis=-1) + o + np.array([self.tx, self.ty])

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.theta), math.sin(self.theta)
        o = np.asarray(self.origin, dtype=np.float64)
        d = (pts - o - np.array([self.tx, self.ty])) / self.scale
        x = c * d[..., 0] + s * d[..., 1]
        y = -s * d[..., 0] + c * d[..., 1]
        return np.stack([x, y], axis=-1) + o

    def is_identity(self) -> bool:
        return self.theta == 0.0 and self.scale == 1.0 and self.tx == 0.0 and self.ty == 0.0


@dataclass(frozen=True)
class EntitySpec:
    shape: str
    color: str
    relation: str
    anchor: int
    size: float = field(default=0.0, compare=False)


@dataclass
class PairConfig:
    height: int = 64
    width: int = 64
    patch: int = 8
    n_matches: int = 48
    kernel_radius: int = 3
    kernel_sigma: float = 1.5
    clip_max: float = 1.0
    normalize_masks: bool = True
    max_rotation_deg: float = 30.0
    scale_range: tuple = (0.8, 1.25)
    max_shift: float = 0.25
    min_visible: float = 0.6

    def validate(self) -> None:
        if self.height % self.patch or self.width % self.patch:
            raise ParameterError(f"image size {self.height}x{self.width} "
                                 f"not divisible by patch {self.patch}")
        if self.n_matches < 1:
            raise ParameterError("n_matches must be at least 1")


@dataclass
class TrainingSample:
    target_image: np.ndarray      # uint8 HxWx3, entity present
    reference_image: np.ndarray   # uint8 HxWx3, scene only
    condition_tokens: np.ndarray  # int64 (4,)
    matches: MatchSet
    masks: tuple                  # (M~0, M~1) float32 token grids
    scene: SceneSpec
    transform: ViewTransform
    entity: EntitySpec
    footprint: np.ndarray         # bool HxW, entity pixels in the target view
    seed: int = 0


# -- condition encoding -------------------------------------------------------
def encode_condition(entity: EntitySpec) -> np.ndarray:
    try:
        ids = [SHAPE_OFFSET + SHAPES.index(entity.shape),
               COLOR_OFFSET + COLORS.index(entity.color),
               RELATION_OFFSET + RELATIONS.index(entity.relation)]
    except ValueError as exc:
        raise EncodingError(f"cannot encode {entity}: {exc}") from None
    if not 0 <= entity.anchor < MAX_OBJECTS:
        raise EncodingError(f"anchor slot {entity.anchor} outside [0, {MAX_OBJECTS})")
    ids.append(ANCHOR_OFFSET + int(entity.anchor))
    return np.array(ids, dtype=np.int64)


def decode_condition(ids) -> EntitySpec:
    ids = [int(i) for i in ids]
    if len(ids) != CONDITION_LENGTH:
        raise EncodingError(f"expected {CONDITION_LENGTH} condition ids, got {len(ids)}")
    ranges = [(SHAPE_OFFSET, SHAPES), (COLOR_OFFSET, COLORS), (RELATION_OFFSET, RELATIONS)]
    vals = []
    for i, (off, names) in zip(ids, ranges):
        if not off <= i < off + len(names):
            raise EncodingError(f"condition id {i} outside [{off}, {off + len(names)})")
        vals.append(names[i - off])
    if not ANCHOR_OFFSET <= ids[3] < VOCAB_SIZE:
        raise EncodingError(f"anchor id {ids[3]} outside [{ANCHOR_OFFSET}, {VOCAB_SIZE})")
    return EntitySpec(vals[0], vals[1], vals[2], ids[3] - ANCHOR_OFFSET)


# -- rasterisation --------------------------------------------------------------
def _half_extent(shape: str, size: float) -> tuple:
    if shape == "rectangle":
        return size / 2, 0.375 * size
    return size / 2, size / 2


def _inside(shape: str, center, size: float, pts: np.ndarray) -> np.ndarray:
    dx = pts[..., 0] - center[0]
    dy = pts[..., 1] - center[1]
    h = size / 2
    if shape == "rectangle":
        return (dx >= -h) & (dx < h) & (dy >= -0.75 * h) & (dy < 0.75 * h)
    if shape == "circle":
        return dx * dx + dy * dy <= h * h
    if shape == "triangle":
        # apex up, base along y = center + h
        return (dy >= -h) & (dy <= h) & (np.abs(dx) <= (dy + h) / 2)
    raise ParameterError(f"unknown shape {shape!r}")


def entity_center(entity: EntitySpec, anchor: SceneObject) -> tuple:
    ax, ay = anchor.center
    off = 1.2 * anchor.size
    if entity.relation == "left-of":
        return ax - off, ay
    if entity.relation == "right-of":
        return ax + off, ay
    if entity.relation == "above":
        return ax, ay - off
    if entity.relation == "below":
        return ax, ay + off
    if entity.relation == "on":
        return ax, ay - _half_extent(anchor.shape, anchor.size)[1]
    raise ParameterError(f"unknown relation {entity.relation!r}")


def render_layers(spec: SceneSpec, transform: ViewTransform | None, height: int, width: int,
                  entity: EntitySpec | None = None) -> tuple:
    """Rasterise a view; return ``(uint8 image, int id map)``.

    The id map holds the object index per pixel, ``-1`` for background and
    ``-2`` for the entity. Pixel ``(x, y)`` samples canonical point
    ``transform.inverse((x, y))``; no anti-aliasing.
    """
    transform = transform or ViewTransform()
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    pix = np.stack([xs, ys], axis=-1)
    canon = transform.inverse(pix) if not transform.is_identity() else pix

    img = np.empty((height, width, 3), dtype=np.float64)
    for ch in range(3):
        img[..., ch] = spec.base_color[ch]
    for ch, amp, fx, fy, phase in spec.waves:
        img[..., int(ch)] += amp * np.sin(fx * canon[..., 0] + fy * canon[..., 1] + phase)
    ids = np.full((height, width), BACKGROUND_ID, dtype=np.int64)

    for i, obj in enumerate(spec.objects):
        hit = _inside(obj.shape, obj.center, obj.size, canon)
        img[hit] = PALETTE[obj.color]
        ids[hit] = i

    if entity is not None:
        anchor = spec.objects[entity.anchor]
        ex, ey = entity_center(entity, anchor)
        hx, hy = _half_extent(entity.shape, entity.size)
        if ex - hx < 0 or ey - hy < 0 or ex + hx > spec.width - 1 or ey + hy > spec.height - 1:
            raise PlacementError(f"entity at ({ex:.1f}, {ey:.1f}) leaves the scene bounds")
        hit = _inside(entity.shape, (ex, ey), entity.size, canon)
        img[hit] = PALETTE[entity.color]
        ids[hit] = ENTITY_ID

    out = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return out, ids


def render_scene(spec: SceneSpec, transform: ViewTransform | None, height: int, width: int,
                 entity: EntitySpec | None = None) -> np.ndarray:
    return render_layers(spec, transform, height, width, entity)[0]


def entity_footprint(spec: SceneSpec, entity: EntitySpec, height: int, width: int) -> np.ndarray:
    return render_layers(spec, None, height, width, entity)[1] == ENTITY_ID


# -- sampling ---------------------------------------------------------------------
def sample_scene(rng: np.random.Generator, height: int, width: int, seed: int = 0) -> SceneSpec:
    base = tuple(float(v) for v in 128 + rng.uniform(-15, 15) + rng.uniform(-6, 6, size=3))
    waves = []
    for _ in range(4):
        ch = int(rng.integers(0, 3))
        amp = float(rng.uniform(4, 12))
        period = float(rng.uniform(24, 64)) * max(height, width) / 64
        angle = float(rng.uniform(0, 2 * np.pi))
        k = 2 * np.pi / period
        waves.append((ch, amp, k * math.cos(angle), k * math.sin(angle),
                      float(rng.uniform(0, 2 * np.pi))))
    n_obj = int(rng.integers(3, MAX_OBJECTS + 1))
    colors = rng.permutation(len(COLORS))[:n_obj]
    unit = min(height, width) / 64
    objects = []
    for i in range(n_obj):
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        size = float(rng.uniform(10, 20)) * unit
        hx, hy = _half_extent(shape, size)
        cx = float(rng.uniform(hx, width - 1 - hx))
        cy = float(rng.uniform(hy, height - 1 - hy))
        objects.append(SceneObject(shape, COLORS[int(colors[i])], (cx, cy), size))
    return SceneSpec(int(seed), height, width, base, waves, objects)


def _visible_fraction(transform: ViewTransform, height: int, width: int) -> float:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    pts = transform.forward(np.stack([xs, ys], axis=-1))
    ok = (pts[..., 0] >= 0) & (pts[..., 0] < width) & (pts[..., 1] >= 0) & (pts[..., 1] < height)
    return float(ok.mean())


def sample_transform(rng: np.random.Generator, config: PairConfig) -> ViewTransform:
    h, w = config.height, config.width
    origin = ((w - 1) / 2, (h - 1) / 2)
    lo, hi = config.scale_range
    for _ in range(100):
        t = ViewTransform(
            theta=float(np.deg2rad(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))),
            scale=float(np.exp(rng.uniform(np.log(lo), np.log(hi)))),
            tx=float(rng.uniform(-config.max_shift, config.max_shift) * w),
            ty=float(rng.uniform(-config.max_shift, config.max_shift) * h),
            origin=origin,
        )
        if _visible_fraction(t, h, w) >= config.min_visible:
            return t
    raise GenerationError("could not sample a transform with enough overlap")


def _sample_entity(rng: np.random.Generator, spec: SceneSpec) -> EntitySpec:
    used = {o.color for o in spec.objects}
    free = [c for c in COLORS if c not in used]
    anchor = int(rng.integers(0, len(spec.objects)))
    relation = RELATIONS[int(rng.integers(0, len(RELATIONS)))]
    shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
    color = free[int(rng.integers(0, len(free)))]
    size = float(rng.uniform(0.5, 0.8) * spec.objects[anchor].size)
    return EntitySpec(shape, color, relation, anchor, size)


def _sample_matches(rng, transform, footprint, config) -> MatchSet:
    h, w, n = config.height, config.width, config.n_matches
    ref = rng.uniform(0, 1, size=(10 * n, 2)) * np.array([w, h])
    tgt = transform.inverse(ref)
    inside = (tgt[:, 0] >= 0) & (tgt[:, 0] < w) & (tgt[:, 1] >= 0) & (tgt[:, 1] < h)
    px = np.clip(np.floor(tgt + 0.5).astype(np.int64), 0, [w - 1, h - 1])
    keep = inside & ~footprint[px[:, 1], px[:, 0]]
    idx = np.flatnonzero(keep)[:n]
    if len(idx) < (n + 1) // 2:
        raise GenerationError(f"only {len(idx)} of {n} matches survived after {10 * n} draws")
    return MatchSet(tgt[idx], ref[idx])


def make_pair(seed: int, config: PairConfig | None = None) -> TrainingSample:
    """Generate one reference/target pair with matches and token-grid masks."""
    config = config or PairConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    from .evalkit import relation_accuracy  # placement is re-checked on the rendered pixels

    for _ in range(200):
        spec = sample_scene(rng, h, w, seed)
        transform = sample_transform(rng, config)
        entity = _sample_entity(rng, spec)
        try:
            target, ids = render_layers(spec, None, h, w, entity)
        except PlacementError:
            continue
        anchor_visible = (ids == entity.anchor).sum()
        if anchor_visible < 0.5 * _area(spec.objects[entity.anchor]):
            continue
        if relation_accuracy(target, entity, spec) is not True:
            continue
        break
    else:
        raise GenerationError(f"seed {seed}: no valid entity placement found")

    reference = render_scene(spec, transform, h, w)
    footprint = ids == ENTITY_ID
    matches = _sample_matches(rng, transform, footprint, config)
    kernel = gaussian_kernel(config.kernel_radius, config.kernel_sigma)
    masks = build_masks(matches, h, w, config.patch, kernel, config.clip_max,
                        normalize=config.normalize_masks)
    return TrainingSample(target, reference, encode_condition(entity), matches, masks,
                          spec, transform, entity, footprint, int(seed))


def _area(obj: SceneObject) -> float:
    if obj.shape == "rectangle":
        return 0.75 * obj.size ** 2
    if obj.shape == "circle":
        return math.pi * obj.size ** 2 / 4
    return obj.size ** 2 / 2


# -- dataset files ------------------------------------------------------------------
SAMPLE_FILES = ("target.png", "reference.png", "condition.json", "matches.jsonl",
                "mask0.gamk", "mask1.gamk", "scene.json")


def _png_write(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def _png_read(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_sample(directory, sample: TrainingSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _png_write(d / "target.png", sample.target_image)
    _png_write(d / "reference.png", sample.reference_image)
    e = sample.entity
    (d / "condition.json").write_text(
        json.dumps({"shape": e.shape, "color": e.color, "relation": e.relation,
                    "anchor": e.anchor}, sort_keys=True) + "\n", encoding="utf-8")
    write_matches(d / "matches.jsonl", sample.matches)
    write_mask(d / "mask0.gamk", sample.masks[0])
    write_mask(d / "mask1.gamk", sample.masks[1])
    meta = {"seed": sample.seed, "scene": sample.scene.to_dict(),
            "transform": asdict(sample.transform), "entity_size": e.size}
    (d / "scene.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def read_sample(directory) -> TrainingSample:
    d = Path(directory)
    missing = [f for f in SAMPLE_FILES if not (d / f).is_file()]
    if missing:
        raise DataError(f"{d}: missing {', '.join(missing)}")
    cond = json.loads((d / "condition.json").read_text(encoding="utf-8"))
    meta = json.loads((d / "scene.json").read_text(encoding="utf-8"))
    spec = SceneSpec.from_dict(meta["scene"])
    tr = meta["transform"]
    transform = ViewTransform(tr["theta"], tr["scale"], tr["tx"], tr["ty"], tuple(tr["origin"]))
    entity = EntitySpec(cond["shape"], cond["color"], cond["relation"], int(cond["anchor"]),
                        float(meta["entity_size"]))
    target = _png_read(d / "target.png")
    h, w = target.shape[:2]
    return TrainingSample(
        target_image=target,
        reference_image=_png_read(d / "reference.png"),
        condition_tokens=encode_condition(entity),
        matches=read_matches(d / "matches.jsonl"),
        masks=(read_mask(d / "mask0.gamk"), read_mask(d / "mask1.gamk")),
        scene=spec,
        transform=transform,
        entity=entity,
        footprint=entity_footprint(spec, entity, h, w),
        seed=int(meta["seed"]),
    )
