"""Seeded synthetic image corpora for desk-scale runs and tests.

Class identity is a geometric pattern drawn on a noisy background:

``quadrant``
    Quadrant ``k`` (TL, TR, BL, BR) is brightened by a random offset. Used
    for CAM faithfulness checks; not horizontal-flip invariant.
``bands``
    Vertical position of a bright band (top / bottom) crossed with stripe
    orientation inside it (horizontal / vertical). Every class survives a
    horizontal flip, so flip augmentation keeps labels intact.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from mrissl.dataset import ClassTaxonomy, DatasetManifest, load_manifest

PATTERNS = ("quadrant", "bands")


def synthetic_taxonomy(n_classes: int = 4, pattern: str = "bands") -> ClassTaxonomy:
    if pattern == "quadrant":
        names = ["Quadrant-TL", "Quadrant-TR", "Quadrant-BL", "Quadrant-BR"]
    elif pattern == "bands":
        names = ["Top-Horizontal", "Top-Vertical", "Bottom-Horizontal", "Bottom-Vertical"]
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    if not 2 <= n_classes <= len(names):
        raise ValueError(f"pattern {pattern!r} supports 2..{len(names)} classes")
    return ClassTaxonomy(tuple(names[:n_classes]))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.35)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    gradient = rng.uniform(-0.08, 0.08) * (xx - 0.5) + rng.uniform(-0.08, 0.08) * (yy - 0.5)
    return base + gradient + rng.normal(0.0, 0.05, (size, size))


def _quadrant_image(label: int, rng: np.random.Generator, size: int) -> np.ndarray:
    img = _background(rng, size)
    half = size // 2
    r0 = (label // 2) * half
    c0 = (label % 2) * half
    img[r0:r0 + half, c0:c0 + half] += rng.uniform(0.3, 0.5)
    return img


def _bands_image(label: int, rng: np.random.Generator, size: int) -> np.ndarray:
    # wide background level, heavy noise and a random global contrast keep
    # raw pixel statistics from separating the classes on their own
    base = rng.uniform(0.05, 0.6)
    img = base + rng.normal(0.0, 0.1, (size, size))
    top = label < 2
    horizontal = label % 2 == 0
    height = rng.uniform(0.28, 0.38) * size
    start = rng.uniform(0.02, 0.1) * size if top else size - height - rng.uniform(0.02, 0.1) * size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    in_band = (yy >= start) & (yy < start + height)
    period = rng.uniform(3.5, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    coord = yy if horizontal else xx
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * coord / period + phase)
    img[in_band] += rng.uniform(0.4, 0.55) * stripes[in_band] + 0.1
    return base + (img - base) * rng.uniform(0.4, 1.4)


def make_image(label: int, rng: np.random.Generator, size: int = 32, pattern: str = "bands") -> np.ndarray:
    """One ``size x size`` float image in ``[0, 1]``."""
    if pattern == "quadrant":
        img = _quadrant_image(label, rng, size)
    elif pattern == "bands":
        img = _bands_image(label, rng, size)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    return np.clip(img, 0.0, 1.0)


def make_arrays(n_per_class: int, n_classes: int = 4, size: int = 32, seed: int = 0,
                pattern: str = "bands") -> tuple[np.ndarray, np.ndarray]:
    """In-memory variant: ``(images (N, size, size), labels (N,))`` in class-major order."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for k in range(n_classes):
        for _ in range(n_per_class):
            images.append(make_image(k, rng, size, pattern))
            labels.append(k)
    return np.stack(images).astype(np.float32), np.array(labels, dtype=np.int64)


def write_dataset(root: str | os.PathLike, n_per_class: int, n_classes: int = 4, size: int = 32,
                  seed: int = 0, pattern: str = "bands") -> DatasetManifest:
    """Write ``root/<class>/<i>.png`` (8-bit grayscale) and return its manifest."""
    root = Path(root)
    taxonomy = synthetic_taxonomy(n_classes, pattern)
    images, labels = make_arrays(n_per_class, n_classes, size, seed, pattern)
    for c in taxonomy.classes:
        (root / c).mkdir(parents=True, exist_ok=True)
    counters = [0] * n_classes
    for img, k in zip(images, labels):
        name = taxonomy.classes[k]
        Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(root / name / f"{counters[k]:05d}.png")
        counters[k] += 1
    return load_manifest(root, taxonomy)
