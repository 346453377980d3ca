"""PGM I/O and the PSNR/SSIM quality metrics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_image
from smoe import synth
from smoe.errors import DimensionMismatch, ImageTooSmall, ParseError
from smoe.imaging import compare, load_image, mse, psnr, save_image, ssim
from smoe.model import Image


# -- PGM I/O ----------------------------------------------------------------


def test_save_load_constant_half(tmp_path):
    path = tmp_path / "half.pgm"
    save_image(synth.constant(6, 4, 0.5), path)
    loaded = load_image(path)
    np.testing.assert_allclose(loaded.pixels, 128.0 / 255.0, rtol=0, atol=0)


def test_load_minimal_p5(tmp_path):
    path = tmp_path / "tiny.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(range(16)))
    img = load_image(path)
    assert (img.width, img.height) == (4, 4)
    assert img.pixels[0, 0] == 0.0
    assert img.pixels[3, 3] == pytest.approx(15.0 / 255.0)


def test_load_header_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 2\n255\n\x00\x10\x20\x30")
    assert load_image(path).width == 2


def test_load_rejects_wrong_depth(tmp_path):
    path = tmp_path / "deep.pgm"
    path.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(ParseError, match="depth"):
        load_image(path)


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(ParseError):
        load_image(path)


def test_load_rejects_truncated_raster(tmp_path):
    path = tmp_path / "short.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
    with pytest.raises(ParseError, match="truncated"):
        load_image(path)


def test_missing_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        load_image(tmp_path / "absent.pgm")


def test_load_grayscale_png(tmp_path):
    pil = pytest.importorskip("PIL.Image")
    data = np.arange(16, dtype=np.uint8).reshape(4, 4) * 17
    path = tmp_path / "img.png"
    pil.fromarray(data, mode="L").save(path)
    img = load_image(path)
    assert (img.width, img.height) == (4, 4)
    np.testing.assert_allclose(img.pixels, data / 255.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_round_trip_within_half_quantization_step(seed, tmp_path_factory):
    rng = np.random.default_rng(seed)
    img = random_image(rng, 9, 7)
    path = tmp_path_factory.mktemp("rt") / "img.pgm"
    save_image(img, path)
    loaded = load_image(path)
    assert np.abs(loaded.pixels - img.pixels).max() <= 1.0 / 510.0 + 1e-12


def test_save_clamps_out_of_range(tmp_path):
    img = Image(np.array([[-0.5, 1.5]]))
    path = tmp_path / "clamp.pgm"
    save_image(img, path)
    assert path.read_bytes()[-2:] == bytes([0, 255])


# -- psnr -------------------------------------------------------------------


def test_psnr_identical_is_infinite():
    img = synth.disk(16, 16)
    assert psnr(img, img) == math.inf


def test_psnr_uniform_offset_twenty_db():
    a = synth.constant(16, 16, 0.5)
    b = synth.constant(16, 16, 0.6)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_symmetry():
    rng = np.random.default_rng(7)
    a, b = random_image(rng, 12, 12), random_image(rng, 12, 12)
    assert psnr(a, b) == psnr(b, a)


def test_psnr_decreases_with_error():
    base = synth.constant(16, 16, 0.4)
    values = [psnr(base, synth.constant(16, 16, 0.4 + d)) for d in (0.05, 0.1, 0.2, 0.4)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_psnr_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        psnr(synth.constant(8, 8, 0.1), synth.constant(8, 9, 0.1))


# -- ssim -------------------------------------------------------------------


def test_ssim_identical_is_one():
    rng = np.random.default_rng(3)
    img = random_image(rng, 24, 16)
    assert ssim(img, img) == 1.0


def test_ssim_constant_images_closed_form():
    a = synth.constant(16, 16, 0.5)
    b = synth.constant(16, 16, 0.6)
    c1 = 1e-4
    want = (2 * 0.5 * 0.6 + c1) / (0.5 ** 2 + 0.6 ** 2 + c1)
    assert ssim(a, b) == pytest.approx(want, abs=1e-9)


def test_ssim_symmetry():
    rng = np.random.default_rng(5)
    a, b = random_image(rng, 16, 16), random_image(rng, 16, 16)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_ssim_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = random_image(rng, 14, 14), random_image(rng, 14, 14)
    value = ssim(a, b)
    assert -1.0 <= value <= 1.0
    assert value < 1.0  # distinct random images


def test_ssim_rejects_small_images():
    with pytest.raises(ImageTooSmall):
        ssim(synth.constant(10, 16, 0.5), synth.constant(10, 16, 0.5))


def test_compare_bundles_metrics():
    a = synth.constant(16, 16, 0.5)
    b = synth.constant(16, 16, 0.6)
    report = compare(a, b)
    assert report.psnr_db == pytest.approx(20.0, abs=1e-9)
    assert report.mse == pytest.approx(0.01, rel=1e-9)
    assert 0.9 < report.ssim < 1.0


def test_mse_matches_manual():
    a = Image(np.array([[0.0, 0.5], [1.0, 0.25]]))
    b = Image(np.array([[0.1, 0.5], [0.8, 0.25]]))
    want = (0.1 ** 2 + 0.2 ** 2) / 4.0
    assert mse(a, b) == pytest.approx(want, rel=1e-12)
