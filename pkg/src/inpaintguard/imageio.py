"""Binary PPM (P6) and PGM (P5) with maxval 255.

Pixels map linearly between bytes and [0, 1] floats: read as v/255,
write as floor(255 v + 0.5) after clipping, so 0.5 lands on 128.
Header comments are tolerated on read and never emitted on write.
"""

import numpy as np


class ImageFormatError(ValueError):
    pass


def _header_tokens(buf, n):
    # whitespace-separated tokens; '#' starts a comment through end of line
    tokens = []
    i = 0
    while len(tokens) < n:
        if i >= len(buf):
            raise ImageFormatError("truncated header")
        c = buf[i:i + 1]
        if c == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
                j += 1
            tokens.append(buf[i:j])
            i = j
    # exactly one whitespace byte separates the header from the raster
    if i >= len(buf) or not buf[i:i + 1].isspace():
        raise ImageFormatError("missing raster separator")
    return tokens, i + 1


def _parse(buf, magic, channels):
    buf = bytes(buf)
    tokens, start = _header_tokens(buf, 4)
    if tokens[0] != magic:
        raise ImageFormatError(f"expected {magic.decode()} header, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise ImageFormatError("non-numeric header field") from exc
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"bad image extent {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    need = width * height * channels
    raster = buf[start:start + need]
    if len(raster) < need:
        raise ImageFormatError(f"raster holds {len(raster)} bytes, needs {need}")
    if len(buf) > start + need:
        raise ImageFormatError("trailing bytes after raster")
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1)


def _quantize(img):
    arr = np.asarray(img, dtype=np.float64)
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def ppm_read(buf):
    """P6 bytes -> [3, H, W] float image in [0, 1]."""
    return _parse(buf, b"P6", 3)


def ppm_write(img):
    """[3, H, W] float image -> P6 bytes."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ImageFormatError("ppm_write expects [3, H, W]")
    _, h, w = img.shape
    raster = _quantize(img).transpose(1, 2, 0).tobytes()
    return b"P6\n%d %d\n255\n" % (w, h) + raster


def pgm_read(buf):
    """P5 bytes -> [H, W] float image in [0, 1]."""
    return _parse(buf, b"P5", 1)


def pgm_write(img):
    """[H, W] float image -> P5 bytes."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ImageFormatError("pgm_write expects [H, W]")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + _quantize(img).tobytes()


def read_image(path):
    with open(path, "rb") as fh:
        return ppm_read(fh.read())


def write_image(path, img):
    with open(path, "wb") as fh:
        fh.write(ppm_write(img))


def read_gray(path):
    with open(path, "rb") as fh:
        return pgm_read(fh.read())


def write_gray(path, img):
    with open(path, "wb") as fh:
        fh.write(pgm_write(img))
