"""Small-object copy-paste operators and policy application.

A policy copies small objects of an image to random free locations of the
same image. Pasted rectangles never overlap any existing box, and pixels are
copied verbatim: no blending or edge smoothing is applied.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .data_model import AnnotatedImage, BBox, Dataset, Instance, Origin, SizeClass, classify_size
from .errors import EmptyPolicySet, SchemaError, SourceTooLarge

log = logging.getLogger(__name__)


class Operation(Enum):
    SINGLE = "single"
    MULTIPLE = "multiple"
    ALL = "all"


@dataclass(frozen=True)
class Policy:
    op: Operation
    p: float
    m: int

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.m not in (1, 2, 3):
            raise ValueError(f"m must be 1, 2 or 3, got {self.m}")

    def to_dict(self) -> dict:
        return {"op": self.op.value, "p": self.p, "m": self.m}

    @classmethod
    def from_dict(cls, d, path: str = "$") -> Policy:
        if not isinstance(d, dict):
            raise SchemaError(path, "policy must be an object")
        for key in ("op", "p", "m"):
            if key not in d:
                raise SchemaError(f"{path}.{key}", "missing")
        try:
            op = Operation(d["op"])
        except ValueError:
            raise SchemaError(f"{path}.op", f"unknown operation {d['op']!r}") from None
        p = d["p"]
        if isinstance(p, bool) or not isinstance(p, (int, float)) or not 0.0 <= p <= 1.0:
            raise SchemaError(f"{path}.p", f"expected a number in [0, 1], got {p!r}")
        m = d["m"]
        if isinstance(m, bool) or not isinstance(m, int) or m not in (1, 2, 3):
            raise SchemaError(f"{path}.m", f"expected 1, 2 or 3, got {m!r}")
        return cls(op, float(p), m)


def load_policies(text: str) -> list[Policy]:
    """Parse a policy file: a JSON list of ``{"op", "p", "m"}`` objects (extra keys ignored)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from None
    if not isinstance(doc, list):
        raise SchemaError("$", "policy file must be a JSON list")
    return [Policy.from_dict(d, f"$[{i}]") for i, d in enumerate(doc)]


@dataclass(frozen=True)
class PlacementConfig:
    max_attempts: int = 50
    margin: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


@dataclass(frozen=True)
class Paste:
    source: Instance
    target: Instance
    rect: tuple[int, int, int, int]  # x0, y0, x1, y1 of the written pixels


@dataclass
class AugmentResult:
    image: AnnotatedImage
    selected: list[Instance] = field(default_factory=list)
    pastes: list[Paste] = field(default_factory=list)
    skipped: int = 0


def pixel_rect(b: BBox) -> tuple[int, int, int, int]:
    """Smallest integer pixel rectangle covering ``b``."""
    return math.floor(b.x), math.floor(b.y), math.ceil(b.x2), math.ceil(b.y2)


def eligible_sources(img: AnnotatedImage) -> list[Instance]:
    return [inst for inst in img.instances
            if inst.origin is Origin.ORIGINAL and not inst.difficult
            and classify_size(inst.bbox) is SizeClass.SMALL]


def select_sources(img: AnnotatedImage, op: Operation, rng: np.random.Generator) -> list[Instance]:
    pool = eligible_sources(img)
    if op is Operation.SINGLE:
        return [pool[rng.integers(len(pool))]] if pool else []
    if op is Operation.ALL:
        return pool
    if len(pool) < 2:
        return []
    size = int(rng.integers(2, len(pool) + 1))
    picked = np.sort(rng.choice(len(pool), size=size, replace=False))
    return [pool[i] for i in picked]


def _place(img, rw, rh, occupied, cfg, rng):
    lo = cfg.margin
    hi_x = img.width - cfg.margin - rw
    hi_y = img.height - cfg.margin - rh
    if hi_x < lo or hi_y < lo:
        raise SourceTooLarge(f"{rw}x{rh} patch does not fit in {img.width}x{img.height} with margin {cfg.margin}")
    for _ in range(cfg.max_attempts):
        tx = int(rng.integers(lo, hi_x + 1))
        ty = int(rng.integers(lo, hi_y + 1))
        cand = BBox(tx, ty, rw, rh)
        if not any(cand.overlaps(o) for o in occupied):
            return tx, ty
    return None


def _fit(start: float, size: float, lo: int, hi: int) -> float:
    # translation can round the far edge past ``hi``; step back by ulps so the
    # box keeps its exact size and stays inside its pixel rectangle
    while start + size > hi and start > lo:
        start = math.nextafter(start, -math.inf)
    return max(start, float(lo))


def _shifted(b: BBox, x0: int, y0: int, tx: int, ty: int, width: int, height: int) -> BBox:
    x1, y1 = math.ceil(b.x2), math.ceil(b.y2)
    x = _fit(tx + (b.x - x0), b.w, tx, min(tx + x1 - x0, width))
    y = _fit(ty + (b.y - y0), b.h, ty, min(ty + y1 - y0, height))
    return BBox(x, y, b.w, b.h)


def find_paste_location(img: AnnotatedImage, source_box: BBox, occupied: Sequence[BBox],
                        cfg: PlacementConfig, rng: np.random.Generator) -> BBox | None:
    """Rejection-sample a same-size location whose pixels avoid every occupied box.

    Returns None when ``cfg.max_attempts`` candidates all collide.
    """
    x0, y0, x1, y1 = pixel_rect(source_box)
    corner = _place(img, x1 - x0, y1 - y0, occupied, cfg, rng)
    if corner is None:
        return None
    return _shifted(source_box, x0, y0, *corner, img.width, img.height)


def augment_image(img: AnnotatedImage, policy: Policy, cfg: PlacementConfig,
                  rng: np.random.Generator, *, gate: bool = True) -> AugmentResult:
    """Apply ``policy`` to one image and report what was pasted.

    ``gate=False`` skips the probability draw and always applies the operator.
    ``img.pixels`` must be loaded.
    """
    if gate and not rng.random() < policy.p:
        return AugmentResult(img)
    sources = select_sources(img, policy.op, rng)
    if not sources:
        return AugmentResult(img)

    src_pixels = img.pixels
    out = src_pixels.copy()
    occupied = [inst.bbox for inst in img.instances]
    instances = list(img.instances)
    pastes, skipped = [], 0
    for src in sources:
        x0, y0, x1, y1 = pixel_rect(src.bbox)
        rw, rh = x1 - x0, y1 - y0
        patch = src_pixels[y0:y1, x0:x1]
        for _ in range(policy.m):
            try:
                corner = _place(img, rw, rh, occupied, cfg, rng)
            except SourceTooLarge:
                corner = None
            if corner is None:
                skipped += 1
                log.debug("image %s: no free location for %s", img.id, src.bbox)
                continue
            tx, ty = corner
            out[ty:ty + rh, tx:tx + rw] = patch
            occupied.append(BBox(tx, ty, rw, rh))
            target = Instance(_shifted(src.bbox, x0, y0, tx, ty, img.width, img.height),
                              src.category, src.difficult, Origin.PASTED)
            instances.append(target)
            pastes.append(Paste(src, target, (tx, ty, tx + rw, ty + rh)))
    if not pastes:
        return AugmentResult(img, sources, [], skipped)
    return AugmentResult(replace(img, instances=tuple(instances), pixels=out), sources, pastes, skipped)


def apply_policy(img: AnnotatedImage, policy: Policy, cfg: PlacementConfig,
                 rng: np.random.Generator) -> AnnotatedImage:
    return augment_image(img, policy, cfg, rng).image


def choose_policy(policies: Sequence[Policy], rng: np.random.Generator) -> Policy:
    if not policies:
        raise EmptyPolicySet("policy set is empty")
    return policies[int(rng.integers(len(policies)))]


def apply_policy_set(img: AnnotatedImage, policies: Sequence[Policy], cfg: PlacementConfig,
                     rng: np.random.Generator) -> AnnotatedImage:
    return apply_policy(img, choose_policy(policies, rng), cfg, rng)


def image_rng(seed: int, image_id: str) -> np.random.Generator:
    """Independent stream per image so results do not depend on processing order."""
    return np.random.default_rng([seed, zlib.crc32(image_id.encode("utf-8"))])


@dataclass
class DatasetAugmentation:
    dataset: Dataset
    results: list[AugmentResult]

    @property
    def pasted(self) -> int:
        return sum(len(r.pastes) for r in self.results)

    @property
    def skipped(self) -> int:
        return sum(r.skipped for r in self.results)


def augment_dataset(d: Dataset, policies: Policy | Sequence[Policy], cfg: PlacementConfig, seed: int,
                    *, gate: str = "bernoulli", workers: int = 1) -> DatasetAugmentation:
    """Augment every image of ``d`` with one policy, or one uniform draw per image from a set.

    ``gate`` controls the probability ``p``:
      - "bernoulli": each image is augmented with probability p (training-time behaviour)
      - "force": every image is augmented
      - "stratified": exactly round(p * len(d)) images, picked at random, are augmented

    Unchanged images are returned as given (pixels not loaded).
    """
    if isinstance(policies, Policy):
        policies = [policies]
    if not policies:
        raise EmptyPolicySet("policy set is empty")
    if gate not in ("bernoulli", "force", "stratified"):
        raise ValueError(f"unknown gate {gate!r}")

    chosen = []
    for img in d.images:
        rng = image_rng(seed, img.id)
        chosen.append((rng, choose_policy(policies, rng) if len(policies) > 1 else policies[0]))

    if gate == "stratified":
        if len(policies) != 1:
            raise ValueError("stratified gating needs a single policy")
        n_on = int(round(policies[0].p * len(d)))
        order = np.random.default_rng([seed, len(d)]).permutation(len(d))
        enabled = set(order[:n_on].tolist())
    else:
        enabled = None

    def work(i):
        img = d.images[i]
        rng, policy = chosen[i]
        if enabled is not None and i not in enabled:
            return AugmentResult(img)
        if gate == "bernoulli" and not rng.random() < policy.p:
            return AugmentResult(img)
        res = augment_image(d.load(img), policy, cfg, rng, gate=False)
        if not res.pastes:
            res.image = img
        return res

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, range(len(d))))
    else:
        results = [work(i) for i in range(len(d))]
    return DatasetAugmentation(d.subset(r.image for r in results), results)
