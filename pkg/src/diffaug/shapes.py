"""Procedural multi-label shapes corpus with known ground truth.

Desk-scale stand-in for a real photographic dataset: each image renders one
or two axis-aligned shapes (circle, square, triangle) on a noisy background.
Scene descriptions are persisted to a sidecar so the procedural generator can
re-render a source image and the harness can score selection decisions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .data import (
    CategorySet,
    DatasetManifest,
    ImageRecord,
    LabelSet,
    ManifestWriter,
    save_image,
)
from .errors import ManifestError

SHAPE_KINDS = ("circle", "square", "triangle")

# Base fill colors per class; individual shapes get seeded jitter around these.
BASE_COLORS = {
    "circle": (214, 64, 52),
    "square": (64, 198, 76),
    "triangle": (66, 92, 219),
}

MIN_HALF = 4  # half-extent floor, keeps every shape at least 8 px wide

# Background gray level varies per image. A fixed level gives background
# patches one coherent feature direction, and the classifier can park stable
# softmax mass there, shadowing rarely-visited object patches during training.
BACKGROUND_LEVEL_RANGE = (100.0, 156.0)
BACKGROUND_NOISE = 14.0


def derive_seed(base_seed: int, *parts) -> int:
    """Stable sub-seed from a base seed and identifying parts (process-independent)."""
    payload = ":".join([str(base_seed)] + [str(p) for p in parts])
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class PlacedShape:
    """One axis-aligned shape: kind, center, half-extent, fill color."""

    kind: str
    cx: int
    cy: int
    half: int
    color: tuple[int, int, int]

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind '{self.kind}'")
        if self.half < MIN_HALF:
            raise ValueError(f"shape half-extent must be >= {MIN_HALF}")

    def bbox(self) -> tuple[int, int, int, int]:
        return (
            self.cy - self.half,
            self.cx - self.half,
            self.cy + self.half,
            self.cx + self.half,
        )


Scene = tuple[PlacedShape, ...]


def shape_mask(shape: PlacedShape, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    dx = xs - shape.cx
    dy = ys - shape.cy
    r = shape.half
    if shape.kind == "circle":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # upward triangle with vertices (cx, cy-r), (cx-r, cy+r), (cx+r, cy+r)
    inside_vertical = (dy >= -r) & (dy <= r)
    half_width = (dy + r) / 2.0
    return inside_vertical & (np.abs(dx) <= half_width)


def render_scene(scene: Iterable[PlacedShape], image_size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Draw shapes over a seeded noise background; rng is consumed for the background only."""
    h, w = image_size
    level = rng.uniform(*BACKGROUND_LEVEL_RANGE)
    bg = rng.normal(level, BACKGROUND_NOISE, size=(h, w, 3))
    pixels = np.clip(bg, 0, 255)
    for shape in scene:
        mask = shape_mask(shape, h, w)
        pixels[mask] = shape.color
    return pixels.astype(np.uint8)


def jitter_color(base: tuple[int, int, int], rng: np.random.Generator, spread: int = 22) -> tuple[int, int, int]:
    jittered = np.asarray(base, dtype=np.int64) + rng.integers(-spread, spread + 1, size=3)
    return tuple(int(v) for v in np.clip(jittered, 0, 255))


def _bboxes_overlap(a: tuple[int, int, int, int], b: tuple[int, int, int, int], margin: int = 1) -> bool:
    ay0, ax0, ay1, ax1 = a
    by0, bx0, by1, bx1 = b
    return not (ax1 + margin < bx0 or bx1 + margin < ax0 or ay1 + margin < by0 or by1 + margin < ay0)


def class_combinations(categories: CategorySet, max_objects: int) -> list[tuple[str, ...]]:
    """All label combinations of size 1..max_objects, in a fixed order.

    Corpora cycle through these so every class appears equally often; with a
    skewed class prior the training optimum parks background-patch mass on the
    most frequent class and its absent-class scores drift above 0.5.
    """
    combos: list[tuple[str, ...]] = []
    for k in range(1, max_objects + 1):
        combos.extend(combinations(categories.names, k))
    return combos


def place_shapes(
    rng: np.random.Generator,
    kinds: list[str],
    image_size: tuple[int, int],
) -> Scene:
    """Place one shape per kind: non-overlapping, fully inside the frame."""
    h, w = image_size
    placed: list[PlacedShape] = []
    for kind in kinds:
        max_half = min(h, w) // 5
        for _ in range(64):  # rejection sampling for a non-overlapping slot
            half = int(rng.integers(MIN_HALF, max_half + 1))
            cx = int(rng.integers(half + 1, w - half - 1))
            cy = int(rng.integers(half + 1, h - half - 1))
            candidate = PlacedShape(kind, cx, cy, half, jitter_color(BASE_COLORS[kind], rng))
            if all(not _bboxes_overlap(candidate.bbox(), other.bbox()) for other in placed):
                placed.append(candidate)
                break
        else:
            # crowded frame: shrink to the floor and drop the overlap constraint
            half = MIN_HALF
            cx = int(rng.integers(half + 1, w - half - 1))
            cy = int(rng.integers(half + 1, h - half - 1))
            placed.append(PlacedShape(kind, cx, cy, half, jitter_color(BASE_COLORS[kind], rng)))
    return tuple(placed)


@dataclass(frozen=True)
class ShapesCorpusConfig:
    images: int
    image_size: tuple[int, int] = (64, 64)
    categories: tuple[str, ...] = SHAPE_KINDS
    max_objects_per_image: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.images < 1:
            raise ValueError("corpus must contain at least one image")
        unknown = set(self.categories) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"categories not renderable: {sorted(unknown)}")
        if not (1 <= self.max_objects_per_image <= len(self.categories)):
            raise ValueError("max_objects_per_image must be in 1..|categories|")


# --- scene sidecar ----------------------------------------------------------


def write_scenes(scenes: Mapping[str, Scene], path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for image_id, scene in scenes.items():
            obj = {
                "id": image_id,
                "shapes": [
                    {"kind": s.kind, "cx": s.cx, "cy": s.cy, "half": s.half, "color": list(s.color)}
                    for s in scene
                ],
            }
            fh.write(json.dumps(obj) + "\n")


def read_scenes(path: Path) -> dict[str, Scene]:
    scenes: dict[str, Scene] = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                scenes[obj["id"]] = tuple(
                    PlacedShape(s["kind"], s["cx"], s["cy"], s["half"], tuple(s["color"]))
                    for s in obj["shapes"]
                )
            except (json.JSONDecodeError, KeyError) as e:
                raise ManifestError(f"scenes file line {line_no}: {e}") from e
    return scenes


def scenes_path_for(manifest_path: Path) -> Path:
    return Path(manifest_path).parent / "scenes.jsonl"


def make_corpus(cfg: ShapesCorpusConfig, out_dir: Path, split_tag: str = "train") -> DatasetManifest:
    """Render a deterministic corpus: PNGs, manifest, and the scene sidecar."""
    out_dir = Path(out_dir)
    categories = CategorySet.of(cfg.categories)
    manifest_path = out_dir / f"{split_tag}.jsonl"
    images_dir = out_dir / "images"

    combos = class_combinations(categories, cfg.max_objects_per_image)
    records: list[ImageRecord] = []
    scenes: dict[str, Scene] = {}
    with ManifestWriter(manifest_path, categories, split_tag) as writer:
        for i in range(cfg.images):
            image_id = f"{split_tag}-{i:05d}"
            rng = np.random.default_rng(derive_seed(cfg.seed, "corpus", image_id))
            scene = place_shapes(rng, list(combos[i % len(combos)]), cfg.image_size)
            pixels = render_scene(scene, cfg.image_size, rng)
            path = images_dir / f"{image_id}.png"
            save_image(pixels, path)
            record = ImageRecord(
                id=image_id,
                path=path,
                labels=LabelSet.of(categories, {s.kind for s in scene}),
                provenance="original",
            )
            writer.append(record)
            records.append(record)
            scenes[image_id] = scene
    write_scenes(scenes, scenes_path_for(manifest_path))
    return DatasetManifest(category_set=categories, records=records, split_tag=split_tag)
