"""Binary -> grayscale image conversion, image files, manifests and the hold-out split.

A malware sample is rendered by laying its bytes out row by row, one byte per
pixel; the row width depends on the file size (see ``DEFAULT_SCHEDULE``).
"""

from __future__ import annotations

import math
import os
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dfsmc.errors import DecodeError, ManifestError
from dfsmc.rng import rng_for

IMAGE_SUFFIXES = (".pgm", ".png")
MANIFEST_MAGIC = "# dfsmc-manifest v1"
_AUG_NAME = re.compile(r"\.aug\d+\.pgm$")


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale raster; ``pixels`` has shape (height, width), dtype uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"image pixels must be uint8, got {px.dtype}")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    def to_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    @classmethod
    def from_float(cls, values: np.ndarray) -> "GrayImage":
        """Inverse of ``to_float``: scale by 255, clamp and round to nearest byte."""
        v = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255)
        return cls(v.astype(np.uint8))

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    __hash__ = None


# ---------------------------------------------------------------------------
# binary -> image

@dataclass(frozen=True)
class WidthSchedule:
    """Maps file-size brackets to image widths: first ``(max_size, width)`` with
    ``size <= max_size`` wins, otherwise ``fallback``."""

    brackets: tuple[tuple[int, int], ...] = (
        (1024, 32),
        (8192, 64),
        (65536, 128),
        (524288, 256),
    )
    fallback: int = 512

    def width_for(self, size: int) -> int:
        for max_size, width in self.brackets:
            if size <= max_size:
                return width
        return self.fallback


DEFAULT_SCHEDULE = WidthSchedule()


def bytes_to_image(data: bytes, schedule: WidthSchedule = DEFAULT_SCHEDULE) -> GrayImage:
    if len(data) == 0:
        raise DecodeError("empty binary")
    width = schedule.width_for(len(data))
    height = -(-len(data) // width)
    flat = np.zeros(width * height, dtype=np.uint8)
    flat[: len(data)] = np.frombuffer(bytes(data), dtype=np.uint8)
    return GrayImage(flat.reshape(height, width))


# ---------------------------------------------------------------------------
# image files

def _pgm_tokens(buf: bytes):
    """Yield (token, end_offset) for the four PGM header fields, skipping comments."""
    pos = 0
    n = len(buf)
    for _ in range(4):
        while pos < n:
            c = buf[pos:pos + 1]
            if c == b"#":
                while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DecodeError("malformed PGM header: unexpected end of header")
        yield buf[start:pos], pos


def decode_pgm(buf: bytes) -> GrayImage:
    if buf[:2] in (b"P6", b"P3"):
        raise DecodeError("color images are not supported (PPM P3/P6)")
    if buf[:2] != b"P5":
        raise DecodeError(f"malformed PGM header: expected magic P5, got {buf[:2]!r}")
    tokens = list(_pgm_tokens(buf))
    try:
        width, height, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        raise DecodeError("malformed PGM header: non-integer field") from None
    if width < 1 or height < 1:
        raise DecodeError(f"malformed PGM header: bad dimensions {width}x{height}")
    if maxval > 255:
        raise DecodeError(f"non-8-bit depth: maxval {maxval}")
    if maxval < 1:
        raise DecodeError(f"malformed PGM header: maxval {maxval}")
    # exactly one whitespace byte separates maxval from the raster
    start = tokens[-1][1] + 1
    need = width * height
    payload = buf[start:start + need]
    if len(payload) < need:
        raise DecodeError("unexpected end of pixel data")
    return GrayImage(np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy())


def encode_pgm(img: GrayImage) -> bytes:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(img.pixels).tobytes()


def _read_png(path: Path) -> GrayImage:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode == "L":
            return GrayImage(np.asarray(im, dtype=np.uint8).copy())
        if im.mode in ("RGB", "RGBA", "P", "CMYK", "LA", "PA", "YCbCr"):
            raise DecodeError(f"{path}: color images are not supported (mode {im.mode})")
        raise DecodeError(f"{path}: non-8-bit depth (mode {im.mode})")


def read_image(path) -> GrayImage:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
        if head.startswith(b"\x89PNG"):
            return _read_png(path)
        buf = head + fh.read()
    try:
        return decode_pgm(buf)
    except DecodeError as exc:
        raise DecodeError(f"{path}: {exc}") from None


def write_image(img: GrayImage, path) -> None:
    Path(path).write_bytes(encode_pgm(img))


def resize_image(img: GrayImage, w: int, h: int) -> GrayImage:
    """Bilinear resize (half-pixel centres, edge clamp) on the float view."""
    if w < 1 or h < 1:
        raise ValueError(f"target size must be >= 1, got {w}x{h}")
    if (w, h) == (img.width, img.height):
        return GrayImage(img.pixels.copy())
    out = bilinear_resize(img.pixels.astype(np.float64), h, w)
    return GrayImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resize the last two axes of ``a`` to (h, w)."""
    y0, y1, fy = _axis_weights(a.shape[-2], h)
    x0, x1, fx = _axis_weights(a.shape[-1], w)
    top = a[..., y0, :] * (1 - fy)[:, None] + a[..., y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


# ---------------------------------------------------------------------------
# manifests

TRAIN = "train"
TEST = "test"


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    family_name: str
    family_index: int
    split: str = TRAIN


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    family_count: int
    seed: int = 0
    ratio: float = 1.0
    root: Path = field(default_factory=Path.cwd)

    def resolve(self, record: SampleRecord) -> Path:
        return Path(self.root) / record.image_path

    def family_names(self) -> list[str]:
        names = {r.family_index: r.family_name for r in self.records}
        return [names[i] for i in range(self.family_count)]

    def subset(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def validate(self) -> None:
        if not self.records:
            raise ManifestError("manifest has no records")
        seen = set()
        by_name: dict[str, int] = {}
        for r in self.records:
            if r.image_path in seen:
                raise ManifestError(f"duplicate path {r.image_path}")
            seen.add(r.image_path)
            if r.split not in (TRAIN, TEST):
                raise ManifestError(f"bad split tag {r.split!r} for {r.image_path}")
            if by_name.setdefault(r.family_name, r.family_index) != r.family_index:
                raise ManifestError(f"family {r.family_name!r} has inconsistent indices")
        expected = {name: i for i, name in enumerate(sorted(by_name))}
        if by_name != expected:
            raise ManifestError("family indices are not dense and lexicographic")
        if len(by_name) != self.family_count:
            raise ManifestError(
                f"family_count {self.family_count} != {len(by_name)} distinct families"
            )


def build_manifest(root_dir) -> DatasetManifest:
    root = Path(root_dir)
    if not root.is_dir():
        raise ManifestError(f"{root}: not a directory")
    families = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not families:
        raise ManifestError(f"{root}: empty directory (no family subdirectories)")
    records = []
    for index, name in enumerate(families):
        files = sorted(
            p.name
            for p in (root / name).iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES and not _AUG_NAME.search(p.name)
        )
        if not files:
            raise ManifestError(f"family with zero samples: {name}")
        records.extend(SampleRecord(f"{name}/{f}", name, index) for f in files)
    manifest = DatasetManifest(records, len(families), root=root.resolve())
    manifest.validate()
    return manifest


def train_count(n: int, ratio: float) -> int:
    # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    return min(n, math.floor(ratio * n + 1e-9))


def stratified_split(manifest: DatasetManifest, ratio: float, seed: int) -> DatasetManifest:
    """Per-family shuffle (stream keyed by seed and family index); first
    floor(ratio * n) go to train. Record order is preserved."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    manifest.validate()
    members: dict[int, list[int]] = {}
    for i, r in enumerate(manifest.records):
        members.setdefault(r.family_index, []).append(i)
    split = [TEST] * len(manifest.records)
    for fam, idx in sorted(members.items()):
        n = len(idx)
        k = train_count(n, ratio)
        if k == 0:
            warnings.warn(
                f"family {manifest.records[idx[0]].family_name!r} has {n} sample(s); "
                f"ratio {ratio} leaves it with no training samples",
                stacklevel=2,
            )
        order = rng_for(seed, "split", fam).permutation(n)
        for j in order[:k]:
            split[idx[j]] = TRAIN
    records = [replace(r, split=s) for r, s in zip(manifest.records, split)]
    return DatasetManifest(records, manifest.family_count, seed, ratio, manifest.root)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.resolve().parent
    lines = [f"{MANIFEST_MAGIC} seed={int(manifest.seed)} ratio={float(manifest.ratio)!r}"]
    for r in manifest.records:
        rel = Path(os.path.relpath(manifest.resolve(r).resolve(), base)).as_posix()
        lines.append(f"{rel}\t{r.family_name}\t{r.family_index}\t{r.split}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"{path}: {exc.strerror}") from None
    lines = text.splitlines()
    m = re.fullmatch(re.escape(MANIFEST_MAGIC) + r" seed=(\d+) ratio=(\S+)", lines[0] if lines else "")
    if not m:
        raise ManifestError(f"{path}: missing '{MANIFEST_MAGIC}' header")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields")
        try:
            records.append(SampleRecord(parts[0], parts[1], int(parts[2]), parts[3]))
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: bad family index {parts[2]!r}") from None
    count = len({r.family_index for r in records})
    manifest = DatasetManifest(records, count, int(m.group(1)), float(m.group(2)), path.resolve().parent)
    manifest.validate()
    return manifest
