import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from dfsmc.errors import DecodeError, ManifestError
from dfsmc.ingest import (DEFAULT_SCHEDULE, TEST, TRAIN, DatasetManifest, GrayImage, SampleRecord,
                          WidthSchedule, bilinear_resize, build_manifest, bytes_to_image, decode_pgm,
                          encode_pgm, read_image, read_manifest, resize_image, stratified_split,
                          train_count, write_image, write_manifest)


def test_4096_bytes_make_a_64x64_image(oracle):
    data = bytes(np.random.default_rng(0).integers(0, 256, 4096, dtype=np.uint8))
    img = bytes_to_image(data)
    assert [img.height, img.width] == oracle["image_shape_4096"]
    assert img.pixels.reshape(-1).tobytes() == data


def test_single_byte_is_padded_to_a_full_row(oracle):
    img = bytes_to_image(b"\xff")
    assert [img.height, img.width] == oracle["image_shape_1"]
    assert img.pixels[0, 0] == 255 and not img.pixels.reshape(-1)[1:].any()


def test_prefix_is_the_input():
    data = bytes(k % 256 for k in range(100))
    assert bytes_to_image(data).pixels.reshape(-1)[:100].tobytes() == data


def test_empty_binary_rejected():
    with pytest.raises(DecodeError, match="empty"):
        bytes_to_image(b"")


@pytest.mark.parametrize("size,width", [(1, 32), (1024, 32), (1025, 64), (8192, 64), (8193, 128),
                                        (65537, 256), (524289, 512)])
def test_width_brackets(size, width):
    assert DEFAULT_SCHEDULE.width_for(size) == width


@given(st.binary(min_size=1, max_size=3000))
def test_bytes_layout_invariants(data):
    img = bytes_to_image(data)
    w = DEFAULT_SCHEDULE.width_for(len(data))
    assert img.width == w and img.height == math.ceil(len(data) / w)
    flat = img.pixels.reshape(-1)
    assert flat[:len(data)].tobytes() == data
    assert not flat[len(data):].any()


def test_custom_schedule():
    img = bytes_to_image(bytes(10), WidthSchedule(((4, 2),), fallback=5))
    assert (img.height, img.width) == (2, 5)


# --- image files -----------------------------------------------------------

def test_pgm_round_trip_small(tmp_path):
    img = GrayImage(np.array([[0, 85], [170, 255]], dtype=np.uint8))
    write_image(img, tmp_path / "a.pgm")
    assert read_image(tmp_path / "a.pgm") == img


def test_pgm_literal_header():
    img = decode_pgm(b"P5 2 2 255\n" + bytes([1, 2, 3, 4]))
    assert img.pixels.tolist() == [[1, 2], [3, 4]]


def test_pgm_header_comments():
    img = decode_pgm(b"P5\n# made by hand\n3 1\n255\n" + bytes([7, 8, 9]))
    assert img.pixels.tolist() == [[7, 8, 9]]


@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_pgm_round_trip(h, w, data):
    px = np.array(data.draw(st.lists(st.integers(0, 255), min_size=h * w, max_size=h * w)),
                  dtype=np.uint8).reshape(h, w)
    img = GrayImage(px)
    assert decode_pgm(encode_pgm(img)) == img


@pytest.mark.parametrize("buf,msg", [
    (b"P5 2 2 255\n" + bytes(3), "unexpected end of pixel data"),
    (b"P5 2 2 65535\n" + bytes(8), "non-8-bit depth"),
    (b"P6 1 1 255\n" + bytes(3), "color"),
    (b"P2 1 1 255\n0", "malformed PGM header"),
    (b"P5 2", "malformed PGM header"),
])
def test_pgm_errors(buf, msg):
    with pytest.raises(DecodeError, match=msg):
        decode_pgm(buf)


def test_png_gray_and_color(tmp_path):
    px = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    Image.fromarray(px, mode="L").save(tmp_path / "g.png")
    assert np.array_equal(read_image(tmp_path / "g.png").pixels, px)
    Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8), mode="RGB").save(tmp_path / "c.png")
    with pytest.raises(DecodeError, match="color"):
        read_image(tmp_path / "c.png")


def test_gray_image_validation():
    with pytest.raises(ValueError):
        GrayImage(np.zeros((2, 2), dtype=np.float64))
    with pytest.raises(ValueError):
        GrayImage(np.zeros((0, 3), dtype=np.uint8))


# --- resize ----------------------------------------------------------------

def test_resize_same_size_is_identity(rng):
    img = GrayImage(rng.integers(0, 256, (5, 7), dtype=np.uint8))
    assert resize_image(img, 7, 5) == img


@pytest.mark.parametrize("w,h", [(1, 1), (3, 5), (9, 4)])
def test_resize_constant(w, h):
    img = GrayImage(np.full((2, 2), 100, dtype=np.uint8))
    assert (resize_image(img, w, h).pixels == 100).all()


def _loop_bilinear(a, h, w):
    H, W = a.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            sy = min(max((i + 0.5) * H / h - 0.5, 0.0), H - 1)
            sx = min(max((j + 0.5) * W / w - 0.5, 0.0), W - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * a[y0, x0] + fx * a[y0, x1])
                         + fy * ((1 - fx) * a[y1, x0] + fx * a[y1, x1]))
    return out


def test_resize_gradient_matches_loop_oracle():
    a = np.add.outer(np.arange(4) * 40.0, np.arange(4) * 10.0)
    assert np.allclose(bilinear_resize(a, 2, 2), _loop_bilinear(a, 2, 2), atol=1e-12)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9))
def test_resize_matches_loop_oracle(H, W, h, w):
    a = np.random.default_rng(H * 100 + W).uniform(0, 255, (H, W))
    assert np.allclose(bilinear_resize(a, h, w), _loop_bilinear(a, h, w), atol=1e-9)


# --- manifests and split -----------------------------------------------------

def _tree(root, counts):
    for name, n in counts.items():
        d = root / name
        d.mkdir(parents=True)
        for i in range(n):
            write_image(GrayImage(np.full((2, 2), i, dtype=np.uint8)), d / f"{i}.pgm")
    return root


def test_build_manifest_lexicographic(tmp_path):
    m = build_manifest(_tree(tmp_path, {"b": 3, "a": 2}))
    assert len(m.records) == 5 and m.family_count == 2
    assert {r.family_name: r.family_index for r in m.records} == {"a": 0, "b": 1}


def test_build_manifest_errors(tmp_path):
    with pytest.raises(ManifestError, match="empty directory"):
        build_manifest(tmp_path)
    (tmp_path / "a").mkdir()
    with pytest.raises(ManifestError, match="family with zero samples"):
        build_manifest(tmp_path)


def test_build_manifest_skips_augmented_copies(tmp_path):
    _tree(tmp_path, {"a": 2})
    write_image(GrayImage(np.zeros((2, 2), dtype=np.uint8)), tmp_path / "a" / "0.aug1.pgm")
    assert len(build_manifest(tmp_path).records) == 2


def test_malimg_counts(oracle):
    assert sum(oracle["malimg_counts"].values()) == oracle["malimg_total"] == 9342
    for name, n in oracle["malimg_counts"].items():
        assert [train_count(n, 0.6), n - train_count(n, 0.6)] == oracle["malimg_split_0_6"][name]


def _synthetic_manifest(counts):
    records = []
    for idx, (name, n) in enumerate(sorted(counts.items())):
        records += [SampleRecord(f"{name}/{i}.pgm", name, idx) for i in range(n)]
    return DatasetManifest(records, len(counts))


def test_split_counts_per_family(oracle):
    m = stratified_split(_synthetic_manifest({"Allaple.A": 2949, "Skintrim.N": 80}), 0.6, seed=9)
    for name in ("Allaple.A", "Skintrim.N"):
        got = [sum(1 for r in m.records if r.family_name == name and r.split == s) for s in (TRAIN, TEST)]
        assert got == oracle["malimg_split_0_6"][name]


@given(st.dictionaries(st.sampled_from("abcdefg"), st.integers(1, 30), min_size=1, max_size=5),
       st.fractions(Fraction(1, 20), 1), st.integers(0, 2**32))
def test_split_properties(counts, ratio, seed):
    m = _synthetic_manifest(counts)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = stratified_split(m, float(ratio), seed)
        b = stratified_split(m, float(ratio), seed)
    assert a.records == b.records
    assert [r.image_path for r in a.records] == [r.image_path for r in m.records]
    for name, n in counts.items():
        k = sum(1 for r in a.records if r.family_name == name and r.split == TRAIN)
        assert k == math.floor(ratio * n)


def test_ratio_one_and_bad_ratio():
    m = _synthetic_manifest({"a": 3, "b": 4})
    assert all(r.split == TRAIN for r in stratified_split(m, 1.0, 0).records)
    for bad in (0.0, 1.5, -0.2):
        with pytest.raises(ValueError):
            stratified_split(m, bad, 0)


def test_tiny_family_warns():
    with pytest.warns(UserWarning, match="no training samples"):
        stratified_split(_synthetic_manifest({"a": 1, "b": 10}), 0.6, 0)


def test_split_depends_on_seed():
    m = _synthetic_manifest({"a": 40})
    assert stratified_split(m, 0.5, 1).records != stratified_split(m, 0.5, 2).records


def test_manifest_round_trip(texture_tree, tmp_path):
    m = stratified_split(build_manifest(texture_tree), 0.6, 5)
    write_manifest(m, tmp_path / "m.tsv")
    back = read_manifest(tmp_path / "m.tsv")
    assert (back.seed, back.ratio) == (5, 0.6)
    assert [(r.family_name, r.family_index, r.split) for r in back.records] == \
        [(r.family_name, r.family_index, r.split) for r in m.records]
    assert [back.resolve(r).resolve() for r in back.records] == [m.resolve(r).resolve() for r in m.records]
    assert back.records[0].image_path.startswith("data/")
    text = (tmp_path / "m.tsv").read_text()
    assert text.startswith("# dfsmc-manifest v1 seed=5 ratio=0.6\n")


def test_manifest_in_other_directory_resolves(texture_tree, tmp_path):
    m = build_manifest(texture_tree)
    (tmp_path / "deep" / "er").mkdir(parents=True)
    write_manifest(m, tmp_path / "deep" / "er" / "m.tsv")
    back = read_manifest(tmp_path / "deep" / "er" / "m.tsv")
    assert [back.resolve(r).resolve() for r in back.records] == [m.resolve(r).resolve() for r in m.records]


@pytest.mark.parametrize("text,msg", [
    ("nothing\n", "header"),
    ("# dfsmc-manifest v1 seed=0 ratio=0.6\na.pgm\tx\n", "4 tab-separated"),
    ("# dfsmc-manifest v1 seed=0 ratio=0.6\na.pgm\tx\t0\tvalid\n", "bad split"),
    ("# dfsmc-manifest v1 seed=0 ratio=0.6\na.pgm\tx\t0\ttrain\na.pgm\tx\t0\ttest\n", "duplicate"),
    ("# dfsmc-manifest v1 seed=0 ratio=0.6\na.pgm\tx\t1\ttrain\n", "dense"),
])
def test_manifest_read_errors(tmp_path, text, msg):
    (tmp_path / "m.tsv").write_text(text)
    with pytest.raises(ManifestError, match=msg):
        read_manifest(tmp_path / "m.tsv")
