"""Random toy datasets for tests, demos and desk-scale searches."""

from __future__ import annotations

import numpy as np

from .data_model import AnnotatedImage, BBox, Dataset, Instance

CATEGORIES = ["plane", "ship", "vehicle"]


def make_image(image_id: str, rng: np.random.Generator, width: int = 64, height: int = 64,
               n_small: tuple[int, int] = (4, 7), n_medium: int = 0, size_range: tuple[int, int] = (3, 9),
               categories=CATEGORIES, difficult_rate: float = 0.0, fractional: bool = False) -> AnnotatedImage:
    """Noise background with non-overlapping textured rectangles as objects.

    Placement gives up quietly when the image is too crowded, so the object
    count can fall short of the request.
    """
    pixels = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    boxes: list[BBox] = []
    instances = []
    wanted = [("small", 1) for _ in range(int(rng.integers(n_small[0], n_small[1] + 1)))]
    if min(width, height) >= 34:
        wanted += [("medium", 1) for _ in range(n_medium)]
    for kind, _ in wanted:
        for _attempt in range(100):
            if kind == "small":
                w, h = (int(v) for v in rng.integers(size_range[0], size_range[1] + 1, size=2))
            else:
                w, h = (int(v) for v in rng.integers(34, min(60, width, height) + 1, size=2))
            if w > width or h > height:
                break
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            fx = fy = 0.0
            if fractional and w > 1 and h > 1:
                fx, fy = float(rng.uniform(0, 0.9)), float(rng.uniform(0, 0.9))
            box = BBox(x + fx, y + fy, w - fx, h - fy)
            if any(box.overlaps(b) for b in boxes):
                continue
            boxes.append(box)
            pixels[y:y + h, x:x + w] = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
            cat = categories[int(rng.integers(len(categories)))]
            instances.append(Instance(box, cat, difficult=bool(rng.random() < difficult_rate)))
            break
    return AnnotatedImage(image_id, width, height, tuple(instances), pixels=pixels)


def make_dataset(n_images: int, seed: int = 0, **kwargs) -> Dataset:
    rng = np.random.default_rng(seed)
    images = [make_image(f"img{i:04d}", rng, **kwargs) for i in range(n_images)]
    return Dataset(images, list(kwargs.get("categories", CATEGORIES)))
