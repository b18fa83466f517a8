"""Flat binary container for named tensors.

Layout, all integers little-endian:

    magic   4 bytes  b"ATSR"
    version u32      currently 1
    count   u32      number of entries
    entry*  name_len u32, name bytes (UTF-8),
            dtype u8 (0 = f32, 1 = f64, 2 = u8),
            rank u8, extents u64 * rank,
            payload (row-major, little-endian)

Entries keep their write order. Reading validates sizes before any
allocation so a corrupt header cannot ask for absurd buffers.
"""

import struct

import numpy as np

MAGIC = b"ATSR"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}

_MAX_NAME = 1 << 16
_MAX_RANK = 16
_MAX_BYTES = 1 << 40


class ContainerError(ValueError):
    """Base class for container parse/serialize failures."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DuplicateNameError(ContainerError):
    pass


class SizeOverflowError(ContainerError):
    pass


def dump_bytes(tensors):
    """Serialize an ordered name->array mapping. dtype must be f32/f64/u8."""
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    seen = set()
    for name, arr in tensors.items():
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
        nb = name.encode("utf-8")
        if not nb or len(nb) >= _MAX_NAME:
            raise ContainerError(f"bad tensor name length for {name!r}")
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")
        code = _CODES[arr.dtype]
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"container ends at byte {len(self.buf)}, needed {self.pos + n}"
            )
        piece = self.buf[self.pos:self.pos + n]
        self.pos += n
        return piece


def load_bytes(buf):
    """Parse container bytes back into an ordered name->array dict."""
    r = _Reader(bytes(buf))
    if r.take(4) != MAGIC:
        raise BadMagicError("not a tensor container (bad magic)")
    version, count = struct.unpack("<II", r.take(8))
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", r.take(4))
        if name_len == 0 or name_len >= _MAX_NAME:
            raise ContainerError(f"bad name length {name_len}")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError("tensor name is not valid UTF-8") from exc
        code, rank = struct.unpack("<BB", r.take(2))
        if code not in _DTYPES:
            raise ContainerError(f"unknown dtype code {code}")
        if rank > _MAX_RANK:
            raise SizeOverflowError(f"rank {rank} exceeds cap {_MAX_RANK}")
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        dt = _DTYPES[code]
        nbytes = dt.itemsize
        for ext in shape:
            nbytes *= ext
            if nbytes > _MAX_BYTES:
                raise SizeOverflowError(f"entry {name!r} claims {nbytes} bytes")
        if nbytes > len(r.buf) - r.pos:
            raise TruncatedError(
                f"entry {name!r} claims {nbytes} bytes, {len(r.buf) - r.pos} remain"
            )
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        data = np.frombuffer(r.take(int(nbytes)), dtype=dt).reshape(shape)
        out[name] = data.copy()
    if r.pos != len(r.buf):
        raise ContainerError(f"{len(r.buf) - r.pos} trailing bytes after entries")
    return out


def write_file(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dump_bytes(tensors))


def read_file(path):
    with open(path, "rb") as fh:
        return load_bytes(fh.read())
