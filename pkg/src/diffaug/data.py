"""Domain types and manifest I/O: labeled images, dataset manifests, merging.

A dataset lives on disk as a line-delimited JSON manifest (one record per
line) plus a sidecar header file naming the category set. Image pixels are
stored as PNG files referenced by path relative to the manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
from PIL import Image

from .errors import CategoryMismatchError, ManifestError

PROVENANCE_ORIGINAL = "original"
PROVENANCE_SYNTHETIC = "synthetic"
_PROVENANCES = (PROVENANCE_ORIGINAL, PROVENANCE_SYNTHETIC)


@dataclass(frozen=True)
class CategorySet:
    """Ordered, duplicate-free class names; the order indexes all score vectors."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 1:
            raise ValueError("category set must contain at least one class")
        if len(set(self.names)) != len(self.names):
            raise ValueError("category names must be unique")
        if any(not isinstance(n, str) or not n for n in self.names):
            raise ValueError("category names must be non-empty strings")

    @classmethod
    def of(cls, names: Iterable[str]) -> "CategorySet":
        return cls(tuple(names))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)


@dataclass(frozen=True)
class LabelSet:
    """A subset of a CategorySet, used for both ground-truth and predicted labels."""

    categories: CategorySet
    members: frozenset[str]

    def __post_init__(self):
        unknown = self.members - set(self.categories.names)
        if unknown:
            raise ValueError(f"labels not in category set: {sorted(unknown)}")

    @classmethod
    def of(cls, categories: CategorySet, names: Iterable[str]) -> "LabelSet":
        return cls(categories, frozenset(names))

    @classmethod
    def empty(cls, categories: CategorySet) -> "LabelSet":
        return cls(categories, frozenset())

    def sorted_names(self) -> list[str]:
        return sorted(self.members)

    def indicator(self) -> np.ndarray:
        """Binary vector over the category order."""
        return np.array([1.0 if c in self.members else 0.0 for c in self.categories], dtype=np.float64)

    def is_subset_of(self, other: "LabelSet") -> bool:
        return subset_of(self, other)

    def __contains__(self, name: str) -> bool:
        return name in self.members

    def __len__(self) -> int:
        return len(self.members)

    def __bool__(self) -> bool:
        return bool(self.members)


def subset_of(a: LabelSet, b: LabelSet) -> bool:
    """True iff every member of ``a`` is in ``b``. Both sets must share a category set."""
    if a.categories != b.categories:
        raise CategoryMismatchError(
            f"label sets belong to different category sets: {a.categories.names} vs {b.categories.names}"
        )
    return a.members <= b.members


@dataclass
class LabeledImage:
    """In-memory image pixels plus image-level labels and provenance."""

    id: str
    pixels: np.ndarray
    labels: LabelSet
    provenance: str = PROVENANCE_ORIGINAL
    source_id: Optional[str] = None
    seed: Optional[int] = None

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"pixels must be h x w x 3, got shape {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError("image must be at least 1 x 1")
        if p.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {p.dtype}")
        if self.provenance not in _PROVENANCES:
            raise ValueError(f"provenance must be one of {_PROVENANCES}")
        if self.provenance == PROVENANCE_SYNTHETIC and not self.source_id:
            raise ValueError("synthetic images must carry a source_id")
        self.pixels = p

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class ImageRecord:
    """Manifest entry: a reference to an image file plus its metadata."""

    id: str
    path: Path
    labels: LabelSet
    provenance: str = PROVENANCE_ORIGINAL
    source_id: Optional[str] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("record id must be non-empty")
        if self.provenance not in _PROVENANCES:
            raise ValueError(f"provenance must be one of {_PROVENANCES}")
        if self.provenance == PROVENANCE_SYNTHETIC and not self.source_id:
            raise ManifestError(f"synthetic record '{self.id}' lacks a source_id")
        self.path = Path(self.path)

    def load(self) -> LabeledImage:
        return LabeledImage(
            id=self.id,
            pixels=load_image(self.path),
            labels=self.labels,
            provenance=self.provenance,
            source_id=self.source_id,
            seed=self.seed,
        )

    def with_labels(self, labels: LabelSet) -> "ImageRecord":
        return replace(self, labels=labels)


@dataclass
class DatasetManifest:
    """Ordered collection of image records sharing one category set."""

    category_set: CategorySet
    records: list[ImageRecord] = field(default_factory=list)
    split_tag: str = ""

    def __post_init__(self):
        self._check_records(self.records)

    def _check_records(self, records: list[ImageRecord]):
        seen: set[str] = set()
        for r in records:
            if r.labels.categories != self.category_set:
                raise CategoryMismatchError(
                    f"record '{r.id}' uses a different category set than the manifest"
                )
            if r.id in seen:
                raise ManifestError(f"duplicate record id '{r.id}'")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    def label_matrix(self) -> np.ndarray:
        """n x |categories| binary indicator matrix in record order."""
        return np.stack([r.labels.indicator() for r in self.records]) if self.records else \
            np.zeros((0, len(self.category_set)))


def merge_datasets(origin: DatasetManifest, aug: DatasetManifest) -> DatasetManifest:
    """Concatenate two manifests: every origin record followed by every aug record."""
    if origin.category_set != aug.category_set:
        raise CategoryMismatchError(
            "cannot merge: manifests use different category sets "
            f"({origin.category_set.names} vs {aug.category_set.names})"
        )
    return DatasetManifest(
        category_set=origin.category_set,
        records=list(origin.records) + list(aug.records),
        split_tag=origin.split_tag,
    )


# --- file formats -----------------------------------------------------------
#
# Manifest: <name>.jsonl with one record object per line, keys
#   id, path, labels, provenance, source_id, seed
# Header sidecar: <name>.header.json with keys `categories` and `split`.


def header_path_for(manifest_path: Path) -> Path:
    manifest_path = Path(manifest_path)
    stem = manifest_path.name
    if stem.endswith(".jsonl"):
        stem = stem[: -len(".jsonl")]
    return manifest_path.with_name(stem + ".header.json")


def _record_to_json(record: ImageRecord, base_dir: Path) -> str:
    path = record.path
    if path.is_absolute():
        path = Path(os.path.relpath(path, base_dir))
    obj = {
        "id": record.id,
        "path": path.as_posix(),
        "labels": record.labels.sorted_names(),
        "provenance": record.provenance,
        "source_id": record.source_id,
        "seed": record.seed,
    }
    return json.dumps(obj)


def _record_from_json(obj: dict, categories: CategorySet, base_dir: Path, line_no: int) -> ImageRecord:
    try:
        labels = obj["labels"]
        unknown = [c for c in labels if c not in categories]
        if unknown:
            raise ManifestError(f"line {line_no}: unknown categories {unknown}")
        return ImageRecord(
            id=obj["id"],
            path=base_dir / obj["path"],
            labels=LabelSet.of(categories, labels),
            provenance=obj["provenance"],
            source_id=obj.get("source_id"),
            seed=obj.get("seed"),
        )
    except KeyError as e:
        raise ManifestError(f"line {line_no}: missing record key {e}") from e


class ManifestWriter:
    """Single-writer append interface; streams records as they are produced."""

    def __init__(self, path: Path, category_set: CategorySet, split_tag: str = ""):
        self.path = Path(path)
        self.category_set = category_set
        self.split_tag = split_tag
        self._seen: set[str] = set()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        header = {"categories": list(category_set.names), "split": split_tag}
        header_path_for(self.path).write_text(json.dumps(header) + "\n")
        self._fh = open(self.path, "w")

    def append(self, record: ImageRecord):
        if record.labels.categories != self.category_set:
            raise CategoryMismatchError(f"record '{record.id}' uses a different category set")
        if record.id in self._seen:
            raise ManifestError(f"duplicate record id '{record.id}'")
        self._seen.add(record.id)
        self._fh.write(_record_to_json(record, self.path.parent) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self) -> "ManifestWriter":
        return self

    def __exit__(self, *exc):
        self.close()


def write_manifest(manifest: DatasetManifest, path: Path):
    """Write manifest + header sidecar; paths are stored relative to the manifest."""
    with ManifestWriter(Path(path), manifest.category_set, manifest.split_tag) as w:
        for record in manifest.records:
            w.append(record)


def read_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    header_path = header_path_for(path)
    if not header_path.exists():
        raise ManifestError(f"missing manifest header: {header_path}")
    header = json.loads(header_path.read_text())
    if "categories" not in header:
        raise ManifestError(f"header {header_path} lacks a 'categories' key")
    categories = CategorySet.of(header["categories"])
    split_tag = header.get("split", "")

    base_dir = path.parent
    records: list[ImageRecord] = []
    seen: set[str] = set()
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {line_no}: malformed record ({e.msg})") from e
            record = _record_from_json(obj, categories, base_dir, line_no)
            if record.id in seen:
                raise ManifestError(f"line {line_no}: duplicate record id '{record.id}'")
            seen.add(record.id)
            records.append(record)
    return DatasetManifest(category_set=categories, records=records, split_tag=split_tag)


def save_image(pixels: np.ndarray, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
