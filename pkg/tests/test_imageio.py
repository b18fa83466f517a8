import numpy as np
import pytest

from inpaintguard.imageio import (
    ImageFormatError,
    pgm_read,
    pgm_write,
    ppm_read,
    ppm_write,
)


def test_ppm_byte_round_trip():
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, size=(3, 7, 5)).astype(np.uint8)
    buf = b"P6\n5 7\n255\n" + raw.transpose(1, 2, 0).tobytes()
    img = ppm_read(buf)
    assert img.shape == (3, 7, 5)
    assert ppm_write(img) == buf


def test_pgm_byte_round_trip():
    rng = np.random.default_rng(1)
    raw = rng.integers(0, 256, size=(4, 6)).astype(np.uint8)
    buf = b"P5\n6 4\n255\n" + raw.tobytes()
    assert pgm_write(pgm_read(buf)) == buf


def test_values_scale_linearly():
    buf = b"P5\n3 1\n255\n" + bytes([0, 128, 255])
    img = pgm_read(buf)
    assert np.allclose(img, [0.0, 128 / 255, 1.0])


def test_half_rounds_up_to_128():
    out = pgm_write(np.full((1, 1), 0.5))
    assert out.endswith(bytes([128]))


def test_rounding_is_half_up_everywhere():
    # v = 126.5/255 sits exactly between 126 and 127
    out = pgm_write(np.array([[126.5 / 255.0]]))
    assert out.endswith(bytes([127]))


def test_out_of_range_clipped():
    out = pgm_write(np.array([[-0.2, 1.7]]))
    assert out.endswith(bytes([0, 255]))


def test_header_comments_tolerated():
    buf = b"P5 # a comment\n# another\n2 1\n255\n" + bytes([7, 9])
    img = pgm_read(buf)
    assert img.shape == (1, 2)


def test_bad_magic():
    with pytest.raises(ImageFormatError):
        ppm_read(b"P5\n1 1\n255\n\x00")


def test_wrong_maxval():
    with pytest.raises(ImageFormatError):
        pgm_read(b"P5\n1 1\n65535\n\x00\x00")


def test_truncated_raster():
    with pytest.raises(ImageFormatError):
        pgm_read(b"P5\n2 2\n255\n\x00\x00")


def test_trailing_bytes_rejected():
    with pytest.raises(ImageFormatError):
        pgm_read(b"P5\n1 1\n255\n\x00\x00")


def test_zero_extent_rejected():
    with pytest.raises(ImageFormatError):
        pgm_read(b"P5\n0 1\n255\n")


def test_quantization_error_bounded():
    rng = np.random.default_rng(2)
    img = rng.random((3, 9, 9))
    back = ppm_read(ppm_write(img))
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
