"""Procedural SOD-style datasets for desk-scale runs and tests.

Each image holds one textured, saturated object on a smooth low-contrast
background; the object mask is written as ground truth. The layout matches
``load_dataset``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def _background(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.35, 0.65, 3)
    slope = rng.uniform(-0.15, 0.15, (2, 3))
    bg = base + yy[..., None] * slope[0] + xx[..., None] * slope[1]
    return bg + rng.normal(0, 0.02, (h, w, 3))


def _object_mask(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
    ry, rx = rng.uniform(0.15, 0.3) * h, rng.uniform(0.15, 0.3) * w
    ang = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(ang) + dx * np.sin(ang)
    v = -dy * np.sin(ang) + dx * np.cos(ang)
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def synthetic_sample(rng: np.random.Generator, h: int, w: int):
    img = _background(rng, h, w)
    mask = _object_mask(rng, h, w)
    color = rng.uniform(0, 1, 3)
    color[rng.integers(3)] = rng.choice([0.05, 0.95])
    period = rng.uniform(4, 9)
    yy, xx = np.mgrid[0:h, 0:w]
    stripes = 0.15 * np.sign(np.sin((yy + xx) * 2 * np.pi / period))
    obj = color + stripes[..., None] + rng.normal(0, 0.05, (h, w, 3))
    img = np.where(mask[..., None], obj, img)
    return np.clip(img, 0, 1), mask


def make_synthetic_dataset(root, name: str, n: int, height: int = 200, width: int = 240,
                           seed: int = 0, splits: dict[str, int] | None = None) -> Path:
    """Write ``n`` samples under ``<root>/<name>``.

    ``splits`` maps split name to a count of leading ids, e.g.
    ``{"train": 40, "test": 10}``; matching ``<split>.txt`` files are written.
    """
    ds = Path(root) / name
    (ds / "images").mkdir(parents=True, exist_ok=True)
    (ds / "gt").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n):
        img, mask = synthetic_sample(rng, height, width)
        sid = f"{name.lower()}_{i:04d}"
        ids.append(sid)
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(ds / "images" / f"{sid}.png")
        Image.fromarray(mask.astype(np.uint8) * 255).save(ds / "gt" / f"{sid}.png")
    if splits:
        start = 0
        for split, count in splits.items():
            (ds / f"{split}.txt").write_text("\n".join(ids[start:start + count]) + "\n")
            start += count
    return ds
