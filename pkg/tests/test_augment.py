import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfsmc.augment import (AffineParams, apply_affine, augment_split, augmented_name, sample_affine,
                           sample_bilinear)
from dfsmc.ingest import TEST, TRAIN, GrayImage, build_manifest, read_image, stratified_split
from dfsmc.rng import rng_for


@given(st.integers(0, 2**63 - 1))
def test_draws_in_range(seed):
    rng = rng_for(seed, "t")
    for _ in range(20):
        p = sample_affine(rng)
        assert p.in_range()
        assert 0 <= p.rotation_deg <= 360 and 0.5 <= p.scale <= 1
        assert -0.05 <= p.shear_x <= 0.05 and -0.05 <= p.shear_y <= 0.05
        assert p.reflect_x in (-1, 1) and p.reflect_y in (-1, 1)


def test_draws_deterministic():
    a = [sample_affine(rng_for(5, "aug")) for _ in range(3)]
    b = [sample_affine(rng_for(5, "aug")) for _ in range(3)]
    assert a == b


def test_scale_mean(oracle):
    rng = rng_for(0, "scale-mean")
    scales = [sample_affine(rng).scale for _ in range(10_000)]
    assert abs(np.mean(scales) - oracle["uniform_scale_mean"]) <= 0.01


def test_reflections_hit_both_signs():
    rng = rng_for(1, "signs")
    draws = [sample_affine(rng) for _ in range(200)]
    assert {d.reflect_x for d in draws} == {-1, 1} == {d.reflect_y for d in draws}


def _pattern(h=8, w=8):
    return GrayImage((np.arange(h * w).reshape(h, w) * 3 % 256).astype(np.uint8))


def test_identity_params():
    img = _pattern(7, 9)
    assert apply_affine(img, AffineParams()) == img


def test_double_reflection_is_identity():
    img = _pattern()
    flip = AffineParams(reflect_x=-1)
    assert apply_affine(apply_affine(img, flip), flip) == img
    assert np.array_equal(apply_affine(img, flip).pixels, img.pixels[:, ::-1])


def test_rotation_90_matches_loop_oracle():
    src = _pattern().pixels
    out = apply_affine(GrayImage(src), AffineParams(rotation_deg=90.0)).pixels
    n = src.shape[0]
    expected = np.zeros_like(src)
    for i in range(n):
        for j in range(n):
            expected[i, j] = src[n - 1 - j, i]
    assert np.abs(out.astype(int) - expected.astype(int)).max() <= 1


def test_scale_down_fills_border_with_zero():
    img = GrayImage(np.full((16, 16), 200, dtype=np.uint8))
    out = apply_affine(img, AffineParams(scale=0.5)).pixels
    assert out[0, 0] == 0 and out[8, 8] == 200


def test_params_out_of_range():
    assert not AffineParams(scale=0.4).in_range()
    assert not AffineParams(shear_x=0.2).in_range()
    assert not AffineParams(reflect_y=0).in_range()


def test_sample_bilinear_midpoint_and_outside():
    src = np.array([[0.0, 10.0], [20.0, 30.0]])
    assert sample_bilinear(src, np.array([0.5]), np.array([0.5]))[0] == pytest.approx(15.0)
    assert sample_bilinear(src, np.array([5.0]), np.array([0.0]))[0] == 0.0


def test_augmented_name():
    assert augmented_name("fam/x_01.png", 2) == "fam/x_01.aug2.pgm"


def _split(tree, ratio=0.6):
    return stratified_split(build_manifest(tree), ratio, 4)


def test_copies_zero_unchanged(texture_tree):
    m = _split(texture_tree)
    assert augment_split(m, 0, seed=1).records == m.records


def test_copies_two_arithmetic(tmp_path):
    from dfsmc import synth

    images, labels = synth.texture_dataset(5, 12, seed=0, families=("noise", "checker", "blobs"))
    tree = synth.write_family_tree(tmp_path / "d", images, labels, ["noise", "checker", "blobs"])
    m = stratified_split(build_manifest(tree), 2 / 3, 0)  # 3 train, 2 test per family
    n_train, n_test = len(m.subset(TRAIN)), len(m.subset(TEST))
    out = augment_split(m, 2, seed=1)
    assert len(out.subset(TRAIN)) == 3 * n_train and out.subset(TEST) == m.subset(TEST)
    for r in out.subset(TRAIN)[n_train:]:
        assert ".aug" in r.image_path and read_image(out.resolve(r)).pixels.shape == (12, 12)


def test_augment_deterministic_bytes(texture_tree):
    m = _split(texture_tree)
    first = augment_split(m, 1, seed=7)
    blobs = {r.image_path: out_bytes for r, out_bytes in
             ((r, first.resolve(r).read_bytes()) for r in first.records if ".aug" in r.image_path)}
    second = augment_split(m, 1, seed=7)
    assert {r.image_path: second.resolve(r).read_bytes() for r in second.records
            if ".aug" in r.image_path} == blobs
    third = augment_split(m, 1, seed=8)
    assert any(third.resolve(r).read_bytes() != blobs[r.image_path]
               for r in third.records if ".aug" in r.image_path)


def test_negative_copies(texture_tree):
    with pytest.raises(ValueError):
        augment_split(_split(texture_tree), -1)
