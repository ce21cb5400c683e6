from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .utils import ConfigError, ensure_dir, derive_rng

logger = logging.getLogger(__name__)

SPLITS = {"train": 0, "test": 1}
NUM_FOLDS = 4
MIN_VISIBLE_AREA = 24
MAX_OBJECTS = 4
AUGMENT_TRIES = 10

_SCENE_STREAM = 11
_CLASS_STREAM = 12
_SEED_STREAM = 13
_AUGMENT_STREAM = 14


@dataclass(frozen=True)
class ShapeClass:
    id: int
    kind: str
    base_color: Tuple[float, float, float]
    color_jitter: float = 0.12
    texture: str = "solid"


SHAPE_CLASSES: Tuple[ShapeClass, ...] = (
    ShapeClass(0, "circle", (0.85, 0.25, 0.25), texture="solid"),
    ShapeClass(1, "square", (0.25, 0.75, 0.30), texture="stripes"),
    ShapeClass(2, "triangle", (0.25, 0.35, 0.85), texture="solid"),
    ShapeClass(3, "ring", (0.90, 0.80, 0.20), texture="checker"),
    ShapeClass(4, "cross", (0.80, 0.30, 0.80), texture="solid"),
    ShapeClass(5, "star", (0.20, 0.80, 0.80), texture="noise"),
    ShapeClass(6, "bar", (0.95, 0.55, 0.15), texture="stripes"),
    ShapeClass(7, "ellipse", (0.55, 0.55, 0.95), texture="checker"),
)


def split_classes(split: str, fold: int = 0) -> List[int]:
    """Class ids of a split; fold f holds out classes 2f and 2f+1 for testing."""
    if split not in SPLITS:
        raise ConfigError("split", f"expected train|test, got {split!r}")
    if not 0 <= fold < NUM_FOLDS:
        raise ConfigError("fold", f"expected 0..{NUM_FOLDS - 1}, got {fold}")
    test = [2 * fold, 2 * fold + 1]
    if split == "test":
        return test
    return [c.id for c in SHAPE_CLASSES if c.id not in test]


@dataclass
class SceneObject:
    class_id: int
    mask: np.ndarray  # bool [H, W]


@dataclass
class Scene:
    image: np.ndarray  # float64 [3, H, W] in [0, 1]
    objects: List[SceneObject]
    seed: int
    split: str

    def class_mask(self, class_id: int) -> np.ndarray:
        out = np.zeros(self.image.shape[1:], dtype=bool)
        for obj in self.objects:
            if obj.class_id == class_id:
                out |= obj.mask
        return out

    @property
    def class_ids(self) -> List[int]:
        return sorted({o.class_id for o in self.objects})


@dataclass
class EpisodeSample:
    supports: List[Tuple[np.ndarray, np.ndarray]]  # (image [3,H,W], bool mask [H,W])
    query: np.ndarray
    query_gt: np.ndarray
    class_id: int
    seed: int
    split: str
    query_objects: List[np.ndarray] = field(default_factory=list)  # instance masks of the query scene
    support_class: Optional[int] = None

    @property
    def k(self) -> int:
        return len(self.supports)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------
def _rotate(points: np.ndarray, angle: float, cx: float, cy: float) -> List[Tuple[float, float]]:
    c, s = math.cos(angle), math.sin(angle)
    rot = points @ np.array([[c, s], [-s, c]])
    return [(float(x + cx), float(y + cy)) for x, y in rot]


def _star(r: float, points: int = 5, inner: float = 0.45) -> np.ndarray:
    ang = np.arange(2 * points) * math.pi / points - math.pi / 2
    rad = np.where(np.arange(2 * points) % 2 == 0, r, r * inner)
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)


def _regular(r: float, sides: int) -> np.ndarray:
    ang = np.arange(sides) * 2 * math.pi / sides - math.pi / 2
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


def _box(hw: float, hh: float) -> np.ndarray:
    return np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])


def _ellipse(a: float, b: float, n: int = 32) -> np.ndarray:
    t = np.arange(n) * 2 * math.pi / n
    return np.stack([a * np.cos(t), b * np.sin(t)], axis=1)


def _plus(r: float, arm: float) -> np.ndarray:
    return np.array(
        [
            [-arm, -r], [arm, -r], [arm, -arm], [r, -arm], [r, arm], [arm, arm],
            [arm, r], [-arm, r], [-arm, arm], [-r, arm], [-r, -arm], [-arm, -arm],
        ]
    )


def render_shape(kind: str, size: Tuple[int, int], cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    """Rasterise one shape into a bool [H, W] mask."""
    h, w = size
    img = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(img)
    if kind in ("circle", "ring"):
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
        if kind == "ring":
            ri = 0.55 * r
            draw.ellipse([cx - ri, cy - ri, cx + ri, cy + ri], fill=0)
    else:
        outline = {
            "square": lambda: _box(0.8 * r, 0.8 * r),
            "triangle": lambda: _regular(1.1 * r, 3),
            "cross": lambda: _plus(r, 0.32 * r),
            "star": lambda: _star(1.15 * r),
            "bar": lambda: _box(1.2 * r, 0.35 * r),
            "ellipse": lambda: _ellipse(1.1 * r, 0.6 * r),
        }
        if kind not in outline:
            raise ConfigError("kind", f"unknown shape kind {kind!r}")
        draw.polygon(_rotate(outline[kind](), angle, cx, cy), fill=255)
    return np.asarray(img) > 0


def _texture(kind: str, size: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w]
    if kind == "stripes":
        return np.where((xs // 3) % 2 == 0, 1.0, 0.7)
    if kind == "checker":
        return np.where(((xs // 4) + (ys // 4)) % 2 == 0, 1.0, 0.75)
    if kind == "noise":
        return 0.85 + 0.15 * rng.random((h, w))
    return np.ones((h, w))


def generate_scene(
    seed: int,
    split: str,
    image_size: int = 64,
    fold: int = 0,
    include: Optional[int] = None,
) -> Scene:
    """Deterministic scene from ``seed``: textured background plus 1-4 non-overlapping shapes.

    Objects are drawn bottom to top; each object keeps only the pixels no later
    object covers. ``include`` forces a topmost object of that class.
    """
    classes = split_classes(split, fold)
    if include is not None and include not in classes:
        raise ConfigError("class_id", f"class {include} is not in the {split} split of fold {fold}")
    rng = derive_rng(seed, SPLITS[split], _SCENE_STREAM)
    size = (image_size, image_size)

    count = int(rng.integers(1, MAX_OBJECTS + 1))
    picks = [int(c) for c in rng.choice(classes, size=count)]
    if include is not None:
        picks[-1] = include

    bg = rng.uniform(0.15, 0.45, size=3)[:, None, None] + 0.08 * rng.standard_normal((3,) + size)
    image = np.clip(bg, 0.0, 1.0)

    shapes = []
    for cid in picks:
        r = float(rng.uniform(0.11, 0.2)) * image_size
        cx = float(rng.uniform(r, image_size - r))
        cy = float(rng.uniform(r, image_size - r))
        angle = float(rng.uniform(0.0, 2 * math.pi))
        shapes.append((cid, render_shape(SHAPE_CLASSES[cid].kind, size, cx, cy, r, angle)))

    covered = np.zeros(size, dtype=bool)
    visible: List[SceneObject] = []
    for cid, raw in reversed(shapes):
        vis = raw & ~covered
        covered |= raw
        visible.append(SceneObject(cid, vis))
    visible.reverse()

    forced = visible[-1] if include is not None else None
    objects = [o for o in visible if o is forced or o.mask.sum() >= MIN_VISIBLE_AREA]
    while len(objects) > 1 and np.logical_or.reduce([o.mask for o in objects]).all():
        objects.pop(0)

    for obj in objects:
        shape_cls = SHAPE_CLASSES[obj.class_id]
        color = np.clip(np.asarray(shape_cls.base_color) + rng.uniform(-shape_cls.color_jitter, shape_cls.color_jitter, 3), 0.0, 1.0)
        fill = color[:, None, None] * _texture(shape_cls.texture, size, rng)[None]
        image = np.where(obj.mask[None], fill, image)
    return Scene(image=image, objects=objects, seed=seed, split=split)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------
def _scene_seed(seed: int, split: str, slot: int) -> int:
    return int(derive_rng(seed, SPLITS[split], _SEED_STREAM, slot).integers(0, 2**31 - 1))


def sample_episode(
    seed: int,
    split: str,
    k: int = 1,
    image_size: int = 64,
    fold: int = 0,
    mismatched: bool = False,
) -> EpisodeSample:
    """k supports and one query sharing a class; support slot j depends only on (seed, j)."""
    if k < 1:
        raise ConfigError("shots", f"k must be >= 1, got {k}")
    classes = split_classes(split, fold)
    rng = derive_rng(seed, SPLITS[split], _CLASS_STREAM)
    cid = int(rng.choice(classes))
    support_cid = cid
    if mismatched:
        others = [c for c in classes if c != cid]
        if not others:
            raise ConfigError("mismatched_support", f"split {split} has a single class")
        support_cid = int(rng.choice(others))

    query_scene = generate_scene(_scene_seed(seed, split, 0), split, image_size, fold, include=cid)
    supports = []
    for j in range(1, k + 1):
        scene = generate_scene(_scene_seed(seed, split, j), split, image_size, fold, include=support_cid)
        supports.append((scene.image, scene.class_mask(support_cid)))
    return EpisodeSample(
        supports=supports,
        query=query_scene.image,
        query_gt=query_scene.class_mask(cid),
        class_id=cid,
        seed=seed,
        split=split,
        query_objects=[o.mask for o in query_scene.objects],
        support_class=support_cid,
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Transform:
    """Nearest-neighbour crop-and-resize followed by an optional horizontal flip."""

    flip: bool = False
    top: int = 0
    left: int = 0
    height: Optional[int] = None
    width: Optional[int] = None

    def apply(self, arr: np.ndarray) -> np.ndarray:
        h, w = arr.shape[-2:]
        ch = self.height or h
        cw = self.width or w
        rows = self.top + np.floor((np.arange(h) + 0.5) * ch / h).astype(np.int64)
        cols = self.left + np.floor((np.arange(w) + 0.5) * cw / w).astype(np.int64)
        out = arr[..., rows[:, None], cols[None, :]]
        return out[..., ::-1].copy() if self.flip else out


IDENTITY = Transform()


def draw_transform(
    rng: np.random.Generator,
    size: Tuple[int, int],
    flip_prob: float = 0.5,
    scale_range: Tuple[float, float] = (0.8, 1.0),
) -> Transform:
    h, w = size
    flip = bool(rng.random() < flip_prob)
    scale = float(rng.uniform(*scale_range))
    ch = max(1, int(round(h * scale)))
    cw = max(1, int(round(w * scale)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return Transform(flip=flip, top=top, left=left, height=ch, width=cw)


def _augment_one(
    image: np.ndarray,
    masks: Sequence[np.ndarray],
    rng: np.random.Generator,
    flip_prob: float,
    scale_range: Tuple[float, float],
) -> Tuple[np.ndarray, List[np.ndarray]]:
    # masks[0] is the supervised mask and must stay non-empty
    for _ in range(AUGMENT_TRIES):
        t = draw_transform(rng, image.shape[-2:], flip_prob, scale_range)
        out_masks = [t.apply(m) for m in masks]
        if out_masks[0].any():
            return t.apply(image), out_masks
    logger.warning("augment: every draw emptied the mask, keeping the sample unchanged")
    return image, list(masks)


def augment(
    sample: EpisodeSample,
    seed: int,
    flip_prob: float = 0.5,
    scale_range: Tuple[float, float] = (0.8, 1.0),
) -> EpisodeSample:
    """Independent flip + crop-resize per image, identical for an image and its masks."""
    if sample.split != "train":
        raise ConfigError("split", "augmentation is for the training split only")
    supports = []
    for j, (img, mask) in enumerate(sample.supports, start=1):
        rng = derive_rng(seed, _AUGMENT_STREAM, j)
        new_img, (new_mask,) = _augment_one(img, [mask], rng, flip_prob, scale_range)
        supports.append((new_img, new_mask))
    rng = derive_rng(seed, _AUGMENT_STREAM, 0)
    q_img, q_masks = _augment_one(
        sample.query, [sample.query_gt, *sample.query_objects], rng, flip_prob, scale_range
    )
    return EpisodeSample(
        supports=supports,
        query=q_img,
        query_gt=q_masks[0],
        class_id=sample.class_id,
        seed=sample.seed,
        split=sample.split,
        query_objects=q_masks[1:],
        support_class=sample.support_class,
    )


def augment_scene(
    scene: Scene,
    seed: int,
    flip_prob: float = 0.5,
    scale_range: Tuple[float, float] = (0.8, 1.0),
) -> Scene:
    if scene.split != "train":
        raise ConfigError("split", "augmentation is for the training split only")
    if not scene.objects:
        return scene
    union = np.logical_or.reduce([o.mask for o in scene.objects])
    rng = derive_rng(seed, _AUGMENT_STREAM, 0)
    img, masks = _augment_one(scene.image, [union] + [o.mask for o in scene.objects], rng, flip_prob, scale_range)
    objects = [SceneObject(o.class_id, m) for o, m in zip(scene.objects, masks[1:])]
    return Scene(image=img, objects=objects, seed=scene.seed, split=scene.split)


# ---------------------------------------------------------------------------
# dump / verify
# ---------------------------------------------------------------------------
META_KEYS = ("class_id", "seed", "split", "k", "image_size", "support_class")


def _save_image(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.transpose(arr, (1, 2, 0)) * 255.0).astype(np.uint8), mode="RGB").save(path)


def _save_mask(mask: np.ndarray, path: Path) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path)


def dump_episode(sample: EpisodeSample, root: Path) -> Path:
    """Write one directory per episode: PNG rasters plus meta.json."""
    out = root / f"episode-{sample.split}-{sample.seed:06d}"
    ensure_dir(out)
    _save_image(sample.query, out / "query.png")
    _save_mask(sample.query_gt, out / "query_mask.png")
    for j, (img, mask) in enumerate(sample.supports):
        _save_image(img, out / f"support_{j}.png")
        _save_mask(mask, out / f"support_{j}_mask.png")
    meta = {
        "class_id": sample.class_id,
        "seed": sample.seed,
        "split": sample.split,
        "k": sample.k,
        "image_size": int(sample.query.shape[-1]),
        "support_class": sample.support_class,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return out


def _read_json(p: Path):
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except Exception:
        return None


def _mask_nonempty(p: Path) -> bool:
    try:
        with Image.open(p) as im:
            return bool(np.asarray(im).any())
    except Exception:
        return False


def verify_dump(episode_dir: Path) -> Tuple[bool, str]:
    if not (episode_dir.exists() and episode_dir.is_dir()):
        return False, f"missing dir: {episode_dir}"
    ok = True
    msgs = []
    meta = _read_json(episode_dir / "meta.json")
    if not isinstance(meta, dict):
        return False, "meta.json missing or invalid JSON"
    for key in META_KEYS:
        if key not in meta:
            ok = False
            msgs.append(f"meta.json missing {key}")
    files = ["query.png", "query_mask.png"]
    for j in range(int(meta.get("k", 0) or 0)):
        files += [f"support_{j}.png", f"support_{j}_mask.png"]
    for name in files:
        if not (episode_dir / name).exists():
            ok = False
            msgs.append(f"missing {name}")
        elif name.endswith("_mask.png") and not _mask_nonempty(episode_dir / name):
            ok = False
            msgs.append(f"empty mask {name}")
    return ok, "; ".join(msgs) if msgs else "OK"


def load_dump_meta(episode_dir: Path) -> Dict[str, object]:
    meta = _read_json(episode_dir / "meta.json")
    return meta if isinstance(meta, dict) else {}
