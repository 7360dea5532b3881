"""Synthetic captioned shape scenes: renderer, captions, and corpus builder.

Scenes hold 1-3 non-overlapping colored shapes on a flat background. The
renderer uses the same pixel-center inclusion rule as the mask rasterizer,
so ground-truth boxes are tight by construction and every image is
re-renderable bit-exactly from its spec.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BoundingBox
from .text import COLORS, NUMBER_TO_COUNT, SHAPES, plural

CANVAS_SIZE = 64
MIN_SIDE = 0.15
MAX_SIDE = 0.40
BOX_GAP = 0.03  # min separation between boxes keeps blobs resolvable

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "gray": (0.5, 0.5, 0.5),
}

CORPUS_FORMAT = "instedit-corpus/1"


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    box: BoundingBox

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape: {self.shape}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color: {self.color}")


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    background: str = "black"
    canvas: int = CANVAS_SIZE

    def __post_init__(self):
        if self.background not in COLOR_RGB:
            raise ValueError(f"unknown background color: {self.background}")
        if len(self.objects) > 3:
            raise ValueError("a scene holds at most 3 objects")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1 :]:
                if a.box.iou(b.box) > 0.0:
                    raise ValueError("scene objects must not overlap")

    def to_dict(self) -> dict:
        return {
            "objects": [
                {"shape": o.shape, "color": o.color, "box": o.box.as_list()}
                for o in self.objects
            ],
            "background": self.background,
            "canvas": self.canvas,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objects = tuple(
            SceneObject(o["shape"], o["color"], BoundingBox(*o["box"]))
            for o in d["objects"]
        )
        return cls(objects=objects, background=d["background"], canvas=d["canvas"])


@dataclass(frozen=True)
class DatasetRecord:
    record_id: int
    image: np.ndarray  # (3, H, W) float32 in [-1, 1]
    caption: str
    scene: SceneSpec
    seed: int


def _shape_mask(obj: SceneObject, size: int) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the shape."""
    b = obj.box
    px = (np.arange(size) + 0.5) / size
    py = (np.arange(size) + 0.5) / size
    x = np.broadcast_to(px[None, :], (size, size))
    y = np.broadcast_to(py[:, None], (size, size))
    if obj.shape == "square":
        return (x >= b.x1) & (x < b.x2) & (y >= b.y1) & (y < b.y2)
    if obj.shape == "circle":
        cx, cy = b.center
        rx, ry = b.width / 2.0, b.height / 2.0
        return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0
    # triangle: apex at top center, base along the bottom edge; the apex is
    # one pixel wide and the width profile is sampled at each pixel's lower
    # edge so the rendered bounding box stays within a pixel of the spec box
    cx = (b.x1 + b.x2) / 2.0
    inside_y = (y >= b.y1) & (y < b.y2)
    half_px = 0.5 / size
    frac = np.clip((y + half_px - b.y1) / b.height, 0.0, 1.0)
    half_width = half_px + frac * (b.width / 2.0 - half_px)
    return inside_y & (np.abs(x - cx) <= half_width)


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Rasterize a scene to a (3, H, W) float32 image in [-1, 1]."""
    size = spec.canvas
    img = np.empty((3, size, size), dtype=np.float32)
    bg = COLOR_RGB[spec.background]
    for c in range(3):
        img[c].fill(bg[c] * 2.0 - 1.0)
    for obj in spec.objects:
        mask = _shape_mask(obj, size)
        rgb = COLOR_RGB[obj.color]
        for c in range(3):
            img[c][mask] = rgb[c] * 2.0 - 1.0
    return img


def caption_scene(spec: SceneSpec) -> str:
    """Grammar caption with left-to-right ordering and count words.

    Identical (color, shape) pairs are grouped under one count word; a
    group sits at the position of its leftmost member.
    """
    groups: dict[tuple[str, str], list[SceneObject]] = {}
    for obj in spec.objects:
        groups.setdefault((obj.color, obj.shape), []).append(obj)

    def group_key(item):
        (color, shape), members = item
        lead = min(members, key=lambda o: (o.box.center[0], o.box.center[1]))
        return (lead.box.center[0], lead.box.center[1], color, shape)

    parts = []
    for (color, shape), members in sorted(groups.items(), key=group_key):
        n = len(members)
        noun = shape if n == 1 else plural(shape)
        parts.append(f"{NUMBER_TO_COUNT[n]} {color} {noun}")
    return " and ".join(parts)


def _random_box(rng: np.random.Generator) -> BoundingBox:
    w = rng.uniform(MIN_SIDE, MAX_SIDE)
    h = rng.uniform(MIN_SIDE, MAX_SIDE)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return BoundingBox(x1, y1, x1 + w, y1 + h)


def _separated(a: BoundingBox, b: BoundingBox, gap: float) -> bool:
    return (
        a.x2 + gap <= b.x1
        or b.x2 + gap <= a.x1
        or a.y2 + gap <= b.y1
        or b.y2 + gap <= a.y1
    )


def random_scene(rng: np.random.Generator) -> SceneSpec:
    """Sample a valid scene; duplicates are generated deliberately."""
    n = int(rng.integers(1, 4))
    if n > 1 and rng.random() < 0.4:
        color = str(rng.choice(COLORS))
        shape = str(rng.choice(SHAPES))
        pairs = [(color, shape)] * n
    else:
        pairs = [(str(rng.choice(COLORS)), str(rng.choice(SHAPES))) for _ in range(n)]

    boxes: list[BoundingBox] = []
    for _ in range(200):
        if len(boxes) == n:
            break
        cand = _random_box(rng)
        if all(_separated(cand, b, BOX_GAP) for b in boxes):
            boxes.append(cand)
    # placement can fail for 3 large boxes; drop trailing objects
    pairs = pairs[: len(boxes)]
    objects = tuple(
        SceneObject(shape=s, color=c, box=b) for (c, s), b in zip(pairs, boxes)
    )
    return SceneSpec(objects=objects)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) [-1, 1] float -> (H, W, 3) uint8."""
    rgb = np.clip((image.transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)
    return np.round(rgb * 255.0).astype(np.uint8)


def from_uint8(rgb: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    return (rgb.astype(np.float32) / 255.0 * 2.0 - 1.0).transpose(2, 0, 1)


def save_png(image: np.ndarray, path: Path) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def load_png(path: Path) -> np.ndarray:
    return from_uint8(np.asarray(Image.open(path).convert("RGB")))


def record_seed(corpus_seed: int, record_id: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, record_id]).generate_state(1)[0])


def build_corpus(n: int, seed: int, out_dir: Path, val_fraction: float = 0.1) -> Path:
    """Write n reproducible records: PNG images plus a JSONL manifest.

    Layout: ``images/{id:05d}.png``, ``manifest.jsonl`` (one record per
    line: id, caption, scene, seed), ``splits.json`` and ``meta.json``.
    Returns the corpus directory.
    """
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "manifest.jsonl", "w") as mf:
        for i in range(n):
            rec = generate_record(seed, i)
            save_png(rec.image, images_dir / f"{i:05d}.png")
            line = {
                "id": rec.record_id,
                "caption": rec.caption,
                "scene": rec.scene.to_dict(),
                "seed": rec.seed,
            }
            mf.write(json.dumps(line, sort_keys=True) + "\n")

    n_val = max(1, int(n * val_fraction)) if n > 1 else 0
    splits = {"train": list(range(n - n_val)), "val": list(range(n - n_val, n))}
    (out_dir / "splits.json").write_text(json.dumps(splits, sort_keys=True))
    meta = {"format": CORPUS_FORMAT, "n": n, "seed": seed, "canvas": CANVAS_SIZE}
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    return out_dir


def generate_record(corpus_seed: int, record_id: int) -> DatasetRecord:
    rseed = record_seed(corpus_seed, record_id)
    rng = np.random.default_rng(rseed)
    scene = random_scene(rng)
    return DatasetRecord(
        record_id=record_id,
        image=render_scene(scene),
        caption=caption_scene(scene),
        scene=scene,
        seed=rseed,
    )


def load_corpus(corpus_dir: Path) -> list[DatasetRecord]:
    corpus_dir = Path(corpus_dir)
    meta = json.loads((corpus_dir / "meta.json").read_text())
    if meta.get("format") != CORPUS_FORMAT:
        raise ValueError(f"unsupported corpus format: {meta.get('format')}")
    records = []
    with open(corpus_dir / "manifest.jsonl") as mf:
        for line in mf:
            d = json.loads(line)
            image = load_png(corpus_dir / "images" / f"{d['id']:05d}.png")
            records.append(
                DatasetRecord(
                    record_id=d["id"],
                    image=image,
                    caption=d["caption"],
                    scene=SceneSpec.from_dict(d["scene"]),
                    seed=d["seed"],
                )
            )
    return records


def corpus_checksum(corpus_dir: Path) -> str:
    """Stable digest over the manifest and every image file."""
    corpus_dir = Path(corpus_dir)
    h = hashlib.sha256()
    h.update((corpus_dir / "manifest.jsonl").read_bytes())
    for png in sorted((corpus_dir / "images").glob("*.png")):
        h.update(png.read_bytes())
    return h.hexdigest()
