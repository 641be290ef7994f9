import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from llcvision.errors import (
    CorruptHeaderError,
    ImageTooSmallError,
    UnsupportedFormatError,
)
from llcvision.imageio import (
    GrayImage,
    PreprocessConfig,
    clahe,
    load_gray,
    median_filter,
    preprocess,
    rgb_to_gray,
    save_pgm,
)

from oracles import global_equalize, median_clamped


def _write(path, data: bytes):
    path.write_bytes(data)
    return path


# ---- GrayImage / config ---------------------------------------------------

def test_gray_image_fields():
    img = GrayImage.from_list(3, 2, [0, 1, 2, 3, 4, 255])
    assert (img.width, img.height) == (3, 2)
    assert img.pixels.shape == (2, 3)
    assert img.pixels.size == img.width * img.height
    assert not img.pixels.flags.writeable


@pytest.mark.parametrize("bad", [[-1, 0, 0, 0], [0, 256, 0, 0]])
def test_gray_image_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        GrayImage.from_list(2, 2, bad)


def test_gray_image_rejects_wrong_count():
    with pytest.raises(ValueError):
        GrayImage.from_list(2, 2, [1, 2, 3])


@pytest.mark.parametrize("kw", [
    {"clahe_tiles_x": 0}, {"clahe_tiles_y": 0}, {"clahe_clip_limit": 0.5}, {"median_radius": -1},
])
def test_preprocess_config_validation(kw):
    with pytest.raises(ValueError):
        PreprocessConfig(**kw)


def test_preprocess_config_defaults():
    cfg = PreprocessConfig()
    assert (cfg.clahe_tiles_x, cfg.clahe_tiles_y, cfg.clahe_clip_limit, cfg.median_radius) == (8, 8, 2.0, 1)


# ---- load_gray --------------------------------------------------------------

def test_load_pgm_identity(tmp_path):
    p = _write(tmp_path / "a.pgm", b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = load_gray(p)
    assert img == GrayImage.from_list(2, 2, [0, 255, 128, 64])


def test_load_ppm_luma(tmp_path):
    p = _write(tmp_path / "r.ppm", b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    assert load_gray(p).pixels.tolist() == [[76]]


def test_luma_rounding():
    # 0.299*255 = 76.245, 0.587*255 = 149.685, 0.114*255 = 29.07
    rgb = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 255]]], dtype=np.uint8)
    assert rgb_to_gray(rgb).tolist() == [[76, 150, 29, 255]]


def test_load_pgm_with_comment(tmp_path):
    p = _write(tmp_path / "c.pgm", b"P5\n# made by hand\n2 1\n255\n" + bytes([7, 9]))
    assert load_gray(p).pixels.tolist() == [[7, 9]]


def test_truncated_pgm_is_corrupt(tmp_path):
    p = _write(tmp_path / "t.pgm", b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(CorruptHeaderError):
        load_gray(p)


def test_truncated_header_is_corrupt(tmp_path):
    p = _write(tmp_path / "h.pgm", b"P5\n4")
    with pytest.raises(CorruptHeaderError):
        load_gray(p)


def test_maxval_must_be_255(tmp_path):
    p = _write(tmp_path / "m.pgm", b"P5\n1 1\n65535\n" + bytes(2))
    with pytest.raises(UnsupportedFormatError):
        load_gray(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_gray(tmp_path / "nope.pgm")


def test_unsupported_format(tmp_path):
    p = _write(tmp_path / "x.bmp", b"BM" + bytes(60))
    with pytest.raises(UnsupportedFormatError):
        load_gray(p)


def test_ascii_netpbm_unsupported(tmp_path):
    p = _write(tmp_path / "a.pgm", b"P2\n1 1\n255\n7\n")
    with pytest.raises(UnsupportedFormatError):
        load_gray(p)


def test_error_kinds_are_distinct():
    assert not issubclass(CorruptHeaderError, UnsupportedFormatError)
    assert not issubclass(UnsupportedFormatError, CorruptHeaderError)
    assert not issubclass(FileNotFoundError, CorruptHeaderError)


def test_save_load_round_trip(tmp_path, rng):
    img = GrayImage(rng.integers(0, 256, (7, 5)).astype(np.uint8))
    save_pgm(img, tmp_path / "r.pgm")
    assert load_gray(tmp_path / "r.pgm") == img


def test_png_load(tmp_path, rng):
    Image = pytest.importorskip("PIL.Image")
    arr = rng.integers(0, 256, (4, 6, 3)).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(tmp_path / "c.png")
    assert np.array_equal(load_gray(tmp_path / "c.png").pixels, rgb_to_gray(arr))


# ---- clahe ----------------------------------------------------------------

def test_clahe_constant_image():
    img = GrayImage(np.full((32, 40), 128, dtype=np.uint8))
    out = clahe(img, PreprocessConfig())
    assert len(np.unique(out.pixels)) == 1


def test_clahe_huge_clip_single_tile_equals_global_equalization(rng):
    px = rng.integers(0, 256, (37, 29)).astype(np.uint8)
    cfg = PreprocessConfig(clahe_tiles_x=1, clahe_tiles_y=1, clahe_clip_limit=1e9)
    out = clahe(GrayImage(px), cfg)
    assert np.array_equal(out.pixels, global_equalize(px))


def test_clahe_two_level_hand_case():
    px = np.zeros((8, 8), dtype=np.uint8)
    px[4:] = 255
    cfg = PreprocessConfig(clahe_tiles_x=1, clahe_tiles_y=1, clahe_clip_limit=1e9)
    out = clahe(GrayImage(px), cfg).pixels
    assert set(out[px == 0].tolist()) == {127}
    assert set(out[px == 255].tolist()) == {255}


def test_clahe_image_smaller_than_grid():
    with pytest.raises(ImageTooSmallError):
        clahe(GrayImage(np.zeros((4, 4), dtype=np.uint8)), PreprocessConfig())


def test_clahe_clipping_limits_contrast_gain(rng):
    # a low-contrast image: clipping must keep the spread below plain equalization
    px = (120 + rng.integers(0, 8, (64, 64))).astype(np.uint8)
    tight = clahe(GrayImage(px), PreprocessConfig(1, 1, 1.0)).pixels
    loose = clahe(GrayImage(px), PreprocessConfig(1, 1, 1e9)).pixels
    assert np.ptp(tight) < np.ptp(loose)


def test_clahe_clip_one_is_identity_like_ramp():
    # clip limit 1 flattens every histogram to uniform: identity-like ramp
    px = np.tile(np.arange(256, dtype=np.uint8), (4, 1))
    out = clahe(GrayImage(px), PreprocessConfig(1, 1, 1.0)).pixels
    assert np.max(np.abs(out.astype(int) - px.astype(int))) <= 1


# ---- median ---------------------------------------------------------------

def test_median_radius_zero_identity(rng):
    img = GrayImage(rng.integers(0, 256, (9, 6)).astype(np.uint8))
    assert median_filter(img, 0) == img


def test_median_center_of_one_to_nine(rng):
    vals = rng.permutation(np.arange(1, 10))
    img = GrayImage(vals.reshape(3, 3).astype(np.uint8))
    assert median_filter(img, 1).pixels[1, 1] == 5


def test_median_removes_single_outlier():
    px = np.full((5, 5), 100, dtype=np.uint8)
    px[2, 3] = 255
    out = median_filter(GrayImage(px), 1).pixels
    assert np.array_equal(out, median_clamped(px, 1))
    assert np.all(out == 100)


@pytest.mark.parametrize("r", [1, 2, 3])
def test_median_matches_bruteforce(rng, r):
    px = rng.integers(0, 256, (11, 8)).astype(np.uint8)
    assert np.array_equal(median_filter(GrayImage(px), r).pixels, median_clamped(px, r))


def test_median_negative_radius():
    with pytest.raises(ValueError):
        median_filter(GrayImage(np.zeros((3, 3), dtype=np.uint8)), -1)


def test_preprocess_is_clahe_then_median(rng):
    px = rng.integers(0, 256, (40, 40)).astype(np.uint8)
    cfg = PreprocessConfig(4, 4, 2.0, 1)
    expect = median_filter(clahe(GrayImage(px), cfg), 1)
    assert preprocess(GrayImage(px), cfg) == expect


# ---- invariants -----------------------------------------------------------

images = st.integers(8, 40).flatmap(
    lambda h: st.integers(8, 40).flatmap(
        lambda w: arrays(np.uint8, (h, w), elements=st.integers(0, 255))
    )
)
configs = st.builds(
    PreprocessConfig,
    clahe_tiles_x=st.integers(1, 8),
    clahe_tiles_y=st.integers(1, 8),
    clahe_clip_limit=st.floats(1.0, 1e6),
    median_radius=st.integers(0, 3),
)


@given(images, configs)
def test_prop_clahe_preserves_shape_and_range(px, cfg):
    out = clahe(GrayImage(px), cfg).pixels
    assert out.shape == px.shape
    assert out.dtype == np.uint8  # uint8 storage makes [0, 255] structural
    assert out.min() >= 0 and out.max() <= 255


@given(images, st.integers(0, 4))
def test_prop_median_preserves_shape(px, r):
    assert median_filter(GrayImage(px), r).pixels.shape == px.shape


@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 255), st.integers(0, 5))
def test_prop_median_idempotent_on_constant(h, w, v, r):
    img = GrayImage(np.full((h, w), v, dtype=np.uint8))
    once = median_filter(img, r)
    assert once == img
    assert median_filter(once, r) == once


@given(st.integers(8, 40), st.integers(8, 40), st.integers(0, 255), configs)
def test_prop_clahe_constant_stays_constant(h, w, v, cfg):
    out = clahe(GrayImage(np.full((h, w), v, dtype=np.uint8)), cfg).pixels
    assert np.unique(out).size == 1
