"""Procedural datasets for desk-scale experiments and tests.

None of this is malware; the generators produce images (or byte blobs) whose
classes are separable by local texture, which is what the extractors see in
real byte-plot images.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from dfsmc.ingest import GrayImage, write_image
from dfsmc.rng import rng_for

TEXTURE_FAMILIES = ("fine-stripes", "coarse-stripes", "checker", "noise", "blobs")
SHAPE_CLASSES = ("disc", "square", "cross", "ring")


def _stripes(rng, size, period):
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    t = xx * np.cos(theta) + yy * np.sin(theta)
    return 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi)))


def texture(kind: str, size: int, rng: np.random.Generator, noise: float = 0.08) -> np.ndarray:
    """One texture sample in [0, 1], shape (size, size)."""
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "h-stripes":
        img = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * yy / rng.uniform(4.0, 8.0) + rng.uniform(0, 2 * np.pi)))
    elif kind == "v-stripes":
        img = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * xx / rng.uniform(4.0, 8.0) + rng.uniform(0, 2 * np.pi)))
    elif kind == "fine-stripes":
        img = _stripes(rng, size, rng.uniform(3.0, 5.0))
    elif kind == "coarse-stripes":
        img = _stripes(rng, size, rng.uniform(12.0, 18.0))
    elif kind == "checker":
        cell = int(rng.integers(3, 6))
        ox, oy = rng.integers(0, cell, size=2)
        img = (((xx + ox) // cell + (yy + oy) // cell) % 2).astype(float)
    elif kind == "noise":
        img = rng.uniform(0, 1, (size, size))
    elif kind == "blobs":
        img = np.zeros((size, size))
        for _ in range(int(rng.integers(2, 5))):
            cx, cy = rng.uniform(0, size, 2)
            r = rng.uniform(size / 8, size / 4)
            img += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
        img /= max(img.max(), 1e-9)
    else:
        raise ValueError(f"unknown texture {kind!r}")
    lo, hi = sorted(rng.uniform(0.0, 1.0, 2))
    hi = max(hi, lo + 0.4)
    img = lo + (min(hi, 1.0) - lo) * img
    return np.clip(img + rng.normal(0, noise, img.shape), 0.0, 1.0)


def texture_dataset(per_class: int, size: int = 64, seed: int = 0,
                    families=TEXTURE_FAMILIES) -> tuple[list[GrayImage], np.ndarray]:
    images, labels = [], []
    for c, kind in enumerate(families):
        rng = rng_for(seed, "texture:" + kind)
        for _ in range(per_class):
            images.append(GrayImage.from_float(texture(kind, size, rng)))
            labels.append(c)
    return images, np.array(labels, dtype=np.intp)


def shape_dataset(per_class: int, size: int = 64, seed: int = 0) -> tuple[list[GrayImage], np.ndarray]:
    """Bright geometric shapes on a noisy background: a source task for fine-tuning."""
    yy, xx = np.mgrid[0:size, 0:size]
    images, labels = [], []
    for c, kind in enumerate(SHAPE_CLASSES):
        rng = rng_for(seed, "shape:" + kind)
        for _ in range(per_class):
            cx, cy = rng.uniform(size * 0.3, size * 0.7, 2)
            r = rng.uniform(size * 0.12, size * 0.25)
            dx, dy = xx - cx, yy - cy
            if kind == "disc":
                m = dx * dx + dy * dy <= r * r
            elif kind == "square":
                m = (np.abs(dx) <= r) & (np.abs(dy) <= r)
            elif kind == "cross":
                m = ((np.abs(dx) <= r / 3) & (np.abs(dy) <= r)) | ((np.abs(dy) <= r / 3) & (np.abs(dx) <= r))
            else:
                d = np.sqrt(dx * dx + dy * dy)
                m = (d <= r) & (d >= 0.6 * r)
            img = 0.15 + 0.7 * m + rng.normal(0, 0.05, (size, size))
            images.append(GrayImage.from_float(np.clip(img, 0, 1)))
            labels.append(c)
    return images, np.array(labels, dtype=np.intp)


def two_view_dataset(per_class: int, size: int = 32, seed: int = 0):
    """Four classes from two independent binary cues, one per image half.

    Left half: horizontal (cue a=0) or vertical stripes (a=1).
    Right half: noise (cue b=0) or smooth blobs (b=1).
    Label = 2a + b. Returns (images, labels, cue_a, cue_b)."""
    half = size // 2
    images, labels, cue_a, cue_b = [], [], [], []
    rng = rng_for(seed, "two-view")
    for label in range(4):
        a, b = divmod(label, 2)
        for _ in range(per_class):
            left = texture(("h-stripes", "v-stripes")[a], size, rng)[:, :half]
            right = texture(("noise", "blobs")[b], size, rng)[:, half:]
            images.append(GrayImage.from_float(np.hstack([left, right])))
            labels.append(label)
            cue_a.append(a)
            cue_b.append(b)
    as_arr = lambda v: np.array(v, dtype=np.intp)  # noqa: E731
    return images, as_arr(labels), as_arr(cue_a), as_arr(cue_b)


def mask_half(x: np.ndarray, keep: str) -> np.ndarray:
    """Zero (the standardised mid-grey) the half of each preprocessed map not kept."""
    out = x.copy()
    half = x.shape[-1] // 2
    if keep == "left":
        out[..., half:] = 0.0
    elif keep == "right":
        out[..., :half] = 0.0
    else:
        raise ValueError("keep must be 'left' or 'right'")
    return out


def write_family_tree(root, images, labels, names) -> Path:
    """root/<family>/<family>_<i>.pgm for every image."""
    root = Path(root)
    counters: dict[int, int] = {}
    for img, lab in zip(images, labels):
        lab = int(lab)
        d = root / names[lab]
        d.mkdir(parents=True, exist_ok=True)
        i = counters.get(lab, 0)
        counters[lab] = i + 1
        write_image(img, d / f"{names[lab]}_{i:04d}.pgm")
    return root


def synthetic_binary(family: int, rng: np.random.Generator, size: int | None = None) -> bytes:
    """Fake executable-like blob: a fixed header, a family-specific repeated code
    motif and a high-entropy tail. For exercising the convert path only."""
    size = size or int(rng.integers(2048, 16384))
    motif = rng_for(family, "motif").integers(0, 256, 16 + 8 * family, dtype=np.uint8)
    head = np.frombuffer(b"MZ\x90\x00" + bytes(60), dtype=np.uint8)
    body_len = (size - len(head)) * 2 // 3
    body = np.resize(motif, body_len)
    tail = rng.integers(0, 256, size - len(head) - body_len, dtype=np.uint8)
    return np.concatenate([head, body, tail]).tobytes()
