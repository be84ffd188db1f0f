"""Random affine augmentation of training images (reflection, scale, shear, rotation)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from dfsmc.ingest import TRAIN, DatasetManifest, GrayImage, SampleRecord, read_image, write_image
from dfsmc.rng import rng_for

ROTATION_RANGE = (0.0, 360.0)
SHEAR_RANGE = (-0.05, 0.05)
SCALE_RANGE = (0.5, 1.0)
DEFAULT_COPIES = 2


@dataclass(frozen=True)
class AffineParams:
    rotation_deg: float = 0.0
    shear_x: float = 0.0
    shear_y: float = 0.0
    reflect_x: int = 1
    reflect_y: int = 1
    scale: float = 1.0

    def in_range(self) -> bool:
        return (
            ROTATION_RANGE[0] <= self.rotation_deg <= ROTATION_RANGE[1]
            and SHEAR_RANGE[0] <= self.shear_x <= SHEAR_RANGE[1]
            and SHEAR_RANGE[0] <= self.shear_y <= SHEAR_RANGE[1]
            and self.reflect_x in (-1, 1)
            and self.reflect_y in (-1, 1)
            and SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]
        )

    def matrix(self) -> np.ndarray:
        """Forward 2x2 map in (x, y) pixel coordinates about the image centre:
        reflect, then scale, then shear, then rotate."""
        t = math.radians(self.rotation_deg)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        shear = np.array([[1.0, self.shear_x], [self.shear_y, 1.0]])
        scale = np.diag([self.scale, self.scale])
        reflect = np.diag([float(self.reflect_x), float(self.reflect_y)])
        return rot @ shear @ scale @ reflect


def sample_affine(rng: np.random.Generator) -> AffineParams:
    rotation = rng.uniform(*ROTATION_RANGE)
    shear_x = rng.uniform(*SHEAR_RANGE)
    shear_y = rng.uniform(*SHEAR_RANGE)
    rx, ry = (1 if b else -1 for b in rng.integers(0, 2, size=2))
    scale = rng.uniform(*SCALE_RANGE)
    return AffineParams(rotation, shear_x, shear_y, rx, ry, scale)


def sample_bilinear(src: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup at fractional (xs, ys); samples outside the raster read 0."""
    h, w = src.shape
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(xs.shape, dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros(xs.shape)
            vals[ok] = src[yi[ok], xi[ok]]
            out += wy * wx * vals
    return out


def apply_affine(img: GrayImage, p: AffineParams) -> GrayImage:
    h, w = img.height, img.width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    inv = np.linalg.inv(p.matrix())
    qy, qx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = qx - cx
    dy = qy - cy
    sx = inv[0, 0] * dx + inv[0, 1] * dy + cx
    sy = inv[1, 0] * dx + inv[1, 1] * dy + cy
    out = sample_bilinear(img.pixels.astype(np.float64), sx, sy)
    return GrayImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def augmented_name(path: str, k: int) -> str:
    p = Path(path)
    return (p.parent / f"{p.stem}.aug{k}.pgm").as_posix()


def augment_split(manifest: DatasetManifest, copies_per_sample: int = DEFAULT_COPIES,
                  seed: int = 0) -> DatasetManifest:
    """Write ``copies_per_sample`` transformed copies beside every train image and
    append them as train records. Test records are left alone."""
    if copies_per_sample < 0:
        raise ValueError("copies_per_sample must be >= 0")
    if copies_per_sample == 0:
        return replace(manifest, records=list(manifest.records))
    extra = []
    for index, record in enumerate(manifest.records):
        if record.split != TRAIN:
            continue
        rng = rng_for(seed, "augment", index)
        img = read_image(manifest.resolve(record))
        for k in range(1, copies_per_sample + 1):
            rel = augmented_name(record.image_path, k)
            write_image(apply_affine(img, sample_affine(rng)), Path(manifest.root) / rel)
            extra.append(SampleRecord(rel, record.family_name, record.family_index, TRAIN))
    return replace(manifest, records=list(manifest.records) + extra)
