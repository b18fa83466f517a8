import numpy as np
import pytest

from inpaintguard.container import (
    BadMagicError,
    ContainerError,
    DuplicateNameError,
    SizeOverflowError,
    TruncatedError,
    VersionError,
    dump_bytes,
    load_bytes,
    read_file,
    write_file,
)


def test_round_trip_all_dtypes():
    rng = np.random.default_rng(0)
    src = {
        "w.alpha": rng.normal(size=(3, 4)).astype(np.float64),
        "w.beta": rng.normal(size=(2, 2, 2)).astype(np.float32),
        "mask": (rng.random((5, 5)) > 0.5).astype(np.uint8),
        "scalarish": np.array([1.5], dtype=np.float64),
    }
    back = load_bytes(dump_bytes(src))
    assert list(back) == list(src)
    for k in src:
        assert back[k].dtype == src[k].dtype
        assert back[k].shape == src[k].shape
        assert np.array_equal(back[k], src[k])


def test_serialization_is_byte_stable():
    a = {"x": np.arange(6, dtype=np.float64).reshape(2, 3)}
    assert dump_bytes(a) == dump_bytes({"x": a["x"].copy()})


def test_round_trip_random_batches():
    rng = np.random.default_rng(1)
    for trial in range(20):
        src = {}
        for i in range(rng.integers(1, 6)):
            rank = int(rng.integers(0, 4))
            shape = tuple(int(x) for x in rng.integers(1, 5, size=rank))
            dt = [np.float32, np.float64, np.uint8][int(rng.integers(0, 3))]
            if dt is np.uint8:
                arr = rng.integers(0, 256, size=shape).astype(dt)
            else:
                arr = rng.normal(size=shape).astype(dt)
            src[f"t{trial}.{i}"] = arr
        back = load_bytes(dump_bytes(src))
        for k in src:
            assert np.array_equal(back[k], src[k]) and back[k].dtype == src[k].dtype


def test_zero_size_tensor():
    back = load_bytes(dump_bytes({"empty": np.zeros((0, 3), dtype=np.float64)}))
    assert back["empty"].shape == (0, 3)


def test_bad_magic():
    with pytest.raises(BadMagicError):
        load_bytes(b"NOPE" + b"\x00" * 16)


def test_bad_version():
    buf = bytearray(dump_bytes({"x": np.zeros(1)}))
    buf[4] = 9
    with pytest.raises(VersionError):
        load_bytes(bytes(buf))


def test_truncation_detected():
    buf = dump_bytes({"x": np.arange(10, dtype=np.float64)})
    with pytest.raises(TruncatedError):
        load_bytes(buf[: len(buf) - 3])


def test_trailing_garbage_detected():
    buf = dump_bytes({"x": np.arange(4, dtype=np.float64)})
    with pytest.raises(ContainerError):
        load_bytes(buf + b"zz")


def test_duplicate_names_detected():
    buf = dump_bytes({"x": np.zeros(2)})
    # splice the single entry twice and patch the count
    head, entry = buf[:12], buf[12:]
    doubled = bytearray(head + entry + entry)
    doubled[8:12] = (2).to_bytes(4, "little")
    with pytest.raises(DuplicateNameError):
        load_bytes(bytes(doubled))


def test_size_overflow_rejected_before_allocation():
    # header claims a 2^60-element tensor in a tiny buffer
    import struct

    buf = b"ATSR" + struct.pack("<II", 1, 1)
    buf += struct.pack("<I", 1) + b"x" + struct.pack("<BB", 1, 1)
    buf += struct.pack("<Q", 1 << 60)
    with pytest.raises(SizeOverflowError):
        load_bytes(buf)


def test_duplicate_rejected_on_write():
    class Sneaky(dict):
        def items(self):
            yield "x", np.zeros(1)
            yield "x", np.zeros(1)

        def __len__(self):
            return 2

    with pytest.raises(DuplicateNameError):
        dump_bytes(Sneaky())


def test_unsupported_dtype_rejected():
    with pytest.raises(ContainerError):
        dump_bytes({"x": np.zeros(2, dtype=np.int32)})


def test_file_round_trip(tmp_path):
    src = {"a": np.random.default_rng(2).normal(size=(4, 4))}
    p = tmp_path / "t.atsr"
    write_file(p, src)
    back = read_file(p)
    assert np.array_equal(back["a"], src["a"])
