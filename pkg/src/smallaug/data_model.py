"""Domain types, size buckets, and annotation readers/writers (DOTA text, COCO JSON, manifests)."""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image

from .errors import DegenerateBox, MalformedLine, SchemaError

SMALL_MAX_AREA = 32 * 32
MEDIUM_MAX_AREA = 96 * 96


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel units: top-left corner plus width and height."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive extent, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def overlaps(self, other: BBox) -> bool:
        """True when the two open interiors intersect (touching edges do not count)."""
        return (min(self.x2, other.x2) - max(self.x, other.x) > 0
                and min(self.y2, other.y2) - max(self.y, other.y) > 0)

    def inside(self, width: float, height: float) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


class SizeClass(Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


class Origin(Enum):
    ORIGINAL = "original"
    PASTED = "pasted"


def classify_size(b: BBox) -> SizeClass:
    area = b.area
    if area <= SMALL_MAX_AREA:
        return SizeClass.SMALL
    if area <= MEDIUM_MAX_AREA:
        return SizeClass.MEDIUM
    return SizeClass.LARGE


@dataclass(frozen=True)
class Instance:
    bbox: BBox
    category: str
    difficult: bool = False
    origin: Origin = Origin.ORIGINAL

    def __post_init__(self):
        if not self.category:
            raise ValueError("instance category must be non-empty")


@dataclass(frozen=True)
class AnnotatedImage:
    """One image and its objects.

    ``pixels`` is an (height, width, 3) uint8 array, or None while the image
    is only known through its manifest entry (``file`` relative to the
    owning dataset's root). Arrays are marked read-only on construction.
    """

    id: str
    width: int
    height: int
    instances: tuple[Instance, ...] = ()
    file: str | None = None
    pixels: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if self.pixels is not None:
            if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
                raise ValueError(
                    f"image {self.id}: pixels must be uint8 of shape "
                    f"{(self.height, self.width, 3)}, got {self.pixels.dtype} {self.pixels.shape}")
            self.pixels.flags.writeable = False
        for inst in self.instances:
            if not inst.bbox.inside(self.width, self.height):
                raise ValueError(f"image {self.id}: box {inst.bbox} is out of bounds")


@dataclass
class Dataset:
    images: list[AnnotatedImage]
    categories: list[str]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        ids = [img.id for img in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("image ids must be unique")
        known = set(self.categories)
        for img in self.images:
            for inst in img.instances:
                if inst.category not in known:
                    raise ValueError(f"image {img.id}: unknown category {inst.category!r}")

    def __len__(self):
        return len(self.images)

    def subset(self, images: Iterable[AnnotatedImage]) -> Dataset:
        return Dataset(list(images), list(self.categories), self.root)

    def load(self, img: AnnotatedImage) -> AnnotatedImage:
        """Return ``img`` with its pixel array populated from disk if needed."""
        if img.pixels is not None:
            return img
        if img.file is None or self.root is None:
            raise FileNotFoundError(f"image {img.id} has neither pixels nor a backing file")
        return replace(img, pixels=read_rgb(self.root / img.file))


def read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


# -- DOTA ---------------------------------------------------------------------

_DOTA_META_PREFIXES = ("imagesource", "gsd")


def parse_dota(annotation_text: str, image_meta: tuple[int, int]) -> list[Instance]:
    """Parse DOTA quadrilateral annotations into axis-aligned instances.

    Each quad becomes the min/max hull of its 8 coordinates, clipped to the
    image given as ``(width, height)``.
    """
    width, height = image_meta
    out = []
    for line_no, raw in enumerate(annotation_text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(_DOTA_META_PREFIXES):
            continue
        parts = line.split()
        if len(parts) < 10:
            raise MalformedLine(line_no, f"expected at least 10 fields, got {len(parts)}")
        try:
            coords = [float(v) for v in parts[:8]]
        except ValueError:
            raise MalformedLine(line_no, "non-numeric coordinate") from None
        if not all(math.isfinite(c) for c in coords):
            raise MalformedLine(line_no, "non-finite coordinate")
        if parts[9] not in ("0", "1"):
            raise MalformedLine(line_no, f"difficult flag must be 0 or 1, got {parts[9]!r}")
        xs, ys = coords[0::2], coords[1::2]
        x0, x1 = max(min(xs), 0.0), min(max(xs), float(width))
        y0, y1 = max(min(ys), 0.0), min(max(ys), float(height))
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            raise DegenerateBox(line_no)
        out.append(Instance(BBox(x0, y0, x1 - x0, y1 - y0), parts[8], difficult=parts[9] == "1"))
    return out


# -- COCO ---------------------------------------------------------------------

def _require(obj: Any, key: str, path: str, types: type | tuple[type, ...]) -> Any:
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{path}.{key}" if path else key, "missing")
    value = obj[key]
    # bool is an int subclass; never a valid number here
    if isinstance(value, bool) or not isinstance(value, types):
        raise SchemaError(f"{path}.{key}" if path else key, f"expected {types}, got {type(value).__name__}")
    return value


def _clip_box(x: float, y: float, w: float, h: float, width: int, height: int) -> BBox | None:
    if x >= 0 and y >= 0 and x + w <= width and y + h <= height:
        return BBox(x, y, w, h) if w > 0 and h > 0 else None
    x0, y0 = max(x, 0.0), max(y, 0.0)
    x1, y1 = min(x + w, float(width)), min(y + h, float(height))
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return BBox(x0, y0, x1 - x0, y1 - y0)


def parse_coco(json_text: str) -> Dataset:
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("$", "top level must be an object")
    images = _require(doc, "images", "", list)
    anns = _require(doc, "annotations", "", list)
    cats = _require(doc, "categories", "", list)

    cat_names: dict[Any, str] = {}
    for i, c in enumerate(cats):
        cid = _require(c, "id", f"categories[{i}]", (int, str))
        cat_names[cid] = _require(c, "name", f"categories[{i}]", str)

    metas = {}
    order = []
    for i, im in enumerate(images):
        path = f"images[{i}]"
        iid = _require(im, "id", path, (int, str))
        w = _require(im, "width", path, int)
        h = _require(im, "height", path, int)
        if w <= 0 or h <= 0:
            raise SchemaError(f"{path}.width", "image size must be positive")
        fname = im.get("file_name")
        if fname is not None and not isinstance(fname, str):
            raise SchemaError(f"{path}.file_name", "expected str")
        if iid in metas:
            raise SchemaError(f"{path}.id", f"duplicate image id {iid!r}")
        metas[iid] = (w, h, fname)
        order.append(iid)

    grouped: dict[Any, list[Instance]] = {iid: [] for iid in order}
    for i, a in enumerate(anns):
        path = f"annotations[{i}]"
        iid = _require(a, "image_id", path, (int, str))
        if iid not in metas:
            raise SchemaError(f"{path}.image_id", f"unknown image id {iid!r}")
        cid = _require(a, "category_id", path, (int, str))
        if cid not in cat_names:
            raise SchemaError(f"{path}.category_id", f"unknown category id {cid!r}")
        bbox = _require(a, "bbox", path, list)
        if len(bbox) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox):
            raise SchemaError(f"{path}.bbox", "expected [x, y, w, h] numbers")
        w, h, _ = metas[iid]
        box = _clip_box(*(float(v) for v in bbox), w, h)
        if box is None:
            raise SchemaError(f"{path}.bbox", "empty after clipping to the image")
        difficult = a.get("difficult", 0)
        if difficult not in (0, 1, True, False):
            raise SchemaError(f"{path}.difficult", "expected 0 or 1")
        origin = a.get("origin", Origin.ORIGINAL.value)
        try:
            origin = Origin(origin)
        except ValueError:
            raise SchemaError(f"{path}.origin", f"unknown origin {origin!r}") from None
        grouped[iid].append(Instance(box, cat_names[cid], bool(difficult), origin))

    out = []
    for iid in order:
        w, h, fname = metas[iid]
        out.append(AnnotatedImage(str(iid), w, h, tuple(grouped[iid]), file=fname))
    return Dataset(out, list(cat_names.values()))


def coco_dict(d: Dataset) -> dict:
    cat_ids = {name: i + 1 for i, name in enumerate(d.categories)}
    images, anns = [], []
    for img in d.images:
        images.append({
            "id": img.id,
            "file_name": img.file if img.file is not None else f"{img.id}.png",
            "width": img.width,
            "height": img.height,
        })
        for inst in img.instances:
            anns.append({
                "id": len(anns) + 1,
                "image_id": img.id,
                "category_id": cat_ids[inst.category],
                "bbox": inst.bbox.to_list(),
                "area": inst.bbox.area,
                "iscrowd": 0,
                "difficult": int(inst.difficult),
                "origin": inst.origin.value,
            })
    return {
        "images": images,
        "annotations": anns,
        "categories": [{"id": i, "name": name} for name, i in cat_ids.items()],
    }


def write_coco(d: Dataset) -> str:
    return json.dumps(coco_dict(d))


# -- manifests ----------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
ANNOTATIONS_NAME = "annotations.json"


def _safe_stem(image_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in image_id)


def write_manifest(d: Dataset, directory: Path | str) -> Path:
    """Write images, COCO annotations, and a manifest under ``directory``.

    Images holding pixels are PNG-encoded; images known only by file are
    copied byte for byte from the dataset root. Returns the manifest path.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    written = []
    for img in d.images:
        stem = _safe_stem(img.id)
        if img.pixels is not None:
            rel = f"images/{stem}.png"
            Image.fromarray(img.pixels, mode="RGB").save(directory / rel, format="PNG")
        else:
            if img.file is None or d.root is None:
                raise FileNotFoundError(f"image {img.id} has neither pixels nor a backing file")
            src = d.root / img.file
            rel = f"images/{stem}{src.suffix.lower()}"
            if src.resolve() != (directory / rel).resolve():
                shutil.copyfile(src, directory / rel)
        written.append(replace(img, file=rel, pixels=None))
    out = Dataset(written, list(d.categories), directory)
    (directory / ANNOTATIONS_NAME).write_text(write_coco(out))
    manifest = {
        "images": [{"id": im.id, "file": im.file, "width": im.width, "height": im.height} for im in written],
        "annotations_file": ANNOTATIONS_NAME,
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_manifest(path: Path | str) -> Dataset:
    """Read a manifest and its annotations; pixel data stays on disk until ``Dataset.load``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid manifest JSON: {exc}") from None
    entries = _require(doc, "images", "", list)
    ann_file = _require(doc, "annotations_file", "", str)
    coco = parse_coco((path.parent / ann_file).read_text())
    by_id = {img.id: img for img in coco.images}
    images = []
    for i, e in enumerate(entries):
        p = f"images[{i}]"
        iid = str(_require(e, "id", p, (int, str)))
        fname = _require(e, "file", p, str)
        w = _require(e, "width", p, int)
        h = _require(e, "height", p, int)
        ann = by_id.pop(iid, None)
        if ann is None:
            raise SchemaError(f"{p}.id", f"image {iid!r} missing from {ann_file}")
        if (ann.width, ann.height) != (w, h):
            raise SchemaError(f"{p}.width", f"size disagrees with {ann_file}")
        images.append(replace(ann, file=fname))
    if by_id:
        raise SchemaError("images", f"{ann_file} lists images absent from the manifest: {sorted(by_id)}")
    return Dataset(images, coco.categories, path.parent.resolve())
