"""Detection AP with a size-bucketed breakdown (all / small / medium / large)."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data_model import AnnotatedImage, BBox, Dataset, SizeClass, classify_size
from .errors import SchemaError, UnknownImageId

RECALL_POINTS = 101
BUCKETS = (None, SizeClass.SMALL, SizeClass.MEDIUM, SizeClass.LARGE)


@dataclass(frozen=True)
class Detection:
    image_id: str
    bbox: BBox
    category: str
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    bbox: BBox
    category: str
    difficult: bool = False


def ground_truths(images: Iterable[AnnotatedImage]) -> list[GroundTruth]:
    return [GroundTruth(img.id, inst.bbox, inst.category, inst.difficult)
            for img in images for inst in img.instances]


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def rank(dets: Sequence[Detection]) -> list[Detection]:
    """Descending score; equal scores keep their input order."""
    return sorted(dets, key=lambda d: -d.score)


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_thresh: float = 0.5) -> list[tuple[Detection, GroundTruth | None]]:
    """Greedy one-to-one matching in score order, per image and category.

    Each detection takes the still-unmatched ground truth with the highest IoU,
    provided it reaches ``iou_thresh``. Output follows the ranked order.
    """
    pool: dict[tuple[str, str], list[GroundTruth]] = defaultdict(list)
    for g in gts:
        pool[(g.image_id, g.category)].append(g)
    taken: set[int] = set()
    out = []
    for det in rank(dets):
        best, best_iou = None, iou_thresh
        for g in pool.get((det.image_id, det.category), ()):
            if id(g) in taken:
                continue
            v = iou(det.bbox, g.bbox)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = g, v
        if best is not None:
            taken.add(id(best))
        out.append((det, best))
    return out


def average_precision(tp_flags: Sequence[bool], n_gt: int, recall_points: int = RECALL_POINTS) -> float | None:
    """Interpolated AP of a ranked TP/FP sequence; None when there is no ground truth.

    Precision is sampled at ``recall_points`` evenly spaced recall levels from
    0 to 1 (101 by default, 11 for the older VOC protocol). Precision at recall
    r is the best precision reached at any recall >= r.
    """
    if recall_points < 2:
        raise ValueError("recall_points must be >= 2")
    if n_gt <= 0:
        return None
    flags = np.asarray(tp_flags, dtype=bool)
    if not flags.size:
        return 0.0
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, flags.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= i/s  <=>  s * tp >= i * n_gt, kept in integers to dodge rounding
    steps = recall_points - 1
    first = np.searchsorted(steps * tp, np.arange(recall_points) * n_gt, side="left")
    sampled = np.where(first < flags.size, envelope[np.minimum(first, flags.size - 1)], 0.0)
    return float(sampled.sum() / recall_points)


@dataclass
class EvalResult:
    map: float | None
    map_s: float | None
    map_m: float | None
    map_l: float | None
    per_category: dict[str, dict[str, float | None]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"map": self.map, "map_l": self.map_l, "map_m": self.map_m, "map_s": self.map_s,
                "per_category": self.per_category, "counts": self.counts}


_KEYS = {None: "ap", SizeClass.SMALL: "ap_s", SizeClass.MEDIUM: "ap_m", SizeClass.LARGE: "ap_l"}


def _mean(values):
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def evaluate(dets: Sequence[Detection], gts: Dataset | Sequence[AnnotatedImage], iou_thresh: float = 0.5,
             include_difficult: bool = True, recall_points: int = RECALL_POINTS) -> EvalResult:
    """AP per category and size bucket, averaged over categories into mAP, mAP_S, mAP_M, mAP_L.

    A bucket keeps only ground truths of that size. Detections matched to a
    ground truth outside the bucket are ignored; unmatched detections count as
    false positives in the bucket of their own box size. With
    ``include_difficult=False`` difficult ground truths are dropped and their
    matches ignored.
    """
    images = gts.images if isinstance(gts, Dataset) else list(gts)
    known = {img.id for img in images}
    for d in dets:
        if d.image_id not in known:
            raise UnknownImageId(f"detection refers to unknown image {d.image_id!r}")
    truth = ground_truths(images)
    matches = match_detections(dets, truth, iou_thresh)

    def counted(g):
        return include_difficult or not g.difficult

    categories = list(dict.fromkeys([g.category for g in truth] + [d.category for d in dets]))
    per_category = {}
    for cat in categories:
        cat_truth = [g for g in truth if g.category == cat and counted(g)]
        cat_matches = [(d, g) for d, g in matches if d.category == cat]
        row = {}
        for bucket in BUCKETS:
            n_gt = sum(1 for g in cat_truth if bucket is None or classify_size(g.bbox) is bucket)
            flags = []
            for d, g in cat_matches:
                if g is not None:
                    if not counted(g) or (bucket is not None and classify_size(g.bbox) is not bucket):
                        continue
                    flags.append(True)
                else:
                    if bucket is not None and classify_size(d.bbox) is not bucket:
                        continue
                    flags.append(False)
            row[_KEYS[bucket]] = average_precision(flags, n_gt, recall_points)
        per_category[cat] = row

    counts = {"small": 0, "medium": 0, "large": 0}
    for g in truth:
        if counted(g):
            counts[classify_size(g.bbox).value] += 1
    counts["total"] = sum(counts.values())

    means = {key: _mean(row[key] for row in per_category.values()) for key in _KEYS.values()}
    return EvalResult(means["ap"], means["ap_s"], means["ap_m"], means["ap_l"], per_category, counts)


def render_table(rows: Sequence[tuple[str, EvalResult]]) -> str:
    """Fixed-width table with columns mAP, mAP_L, mAP_M, mAP_S; absent buckets print as '-'."""
    width = max([len("method")] + [len(label) for label, _ in rows])
    cols = ("mAP", "mAP_L", "mAP_M", "mAP_S")
    lines = [f"{'method':<{width}}" + "".join(f"{c:>8}" for c in cols)]
    for label, r in rows:
        cells = "".join(f"{'-' if v is None else format(v, '.3f'):>8}" for v in (r.map, r.map_l, r.map_m, r.map_s))
        lines.append(f"{label:<{width}}{cells}")
    return "\n".join(lines) + "\n"


def load_detections(text: str) -> list[Detection]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from None
    if not isinstance(doc, list):
        raise SchemaError("$", "detections file must be a JSON list")
    out = []
    for i, d in enumerate(doc):
        path = f"$[{i}]"
        if not isinstance(d, dict):
            raise SchemaError(path, "expected an object")
        for key in ("image_id", "category", "bbox", "score"):
            if key not in d:
                raise SchemaError(f"{path}.{key}", "missing")
        bbox, score = d["bbox"], d["score"]
        if not (isinstance(bbox, list) and len(bbox) == 4
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox)):
            raise SchemaError(f"{path}.bbox", "expected [x, y, w, h] numbers")
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0 <= score <= 1:
            raise SchemaError(f"{path}.score", f"expected a number in [0, 1], got {score!r}")
        if not isinstance(d["category"], str) or not d["category"]:
            raise SchemaError(f"{path}.category", "expected a non-empty string")
        try:
            box = BBox(*(float(v) for v in bbox))
        except ValueError as exc:
            raise SchemaError(f"{path}.bbox", str(exc)) from None
        out.append(Detection(str(d["image_id"]), box, d["category"], float(score)))
    return out
