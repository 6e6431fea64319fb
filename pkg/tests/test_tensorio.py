"""Binary tensor container: round-trips and corruption errors."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imd.tensorio import (
    TensorFormatError,
    read_sidecar,
    read_tensor,
    write_sidecar,
    write_tensor,
)


def test_roundtrip_f32(tmp_path, rng):
    x = rng.standard_normal((2, 3)).astype(np.float32)
    p = tmp_path / "t.imdt"
    write_tensor(p, x)
    y = read_tensor(p)
    assert y.dtype == np.float32
    np.testing.assert_array_equal(x, y)


@given(
    rank=st.integers(1, 4),
    code=st.sampled_from(["f4", "f8", "u1"]),
    seed=st.integers(0, 2**31),
)
@settings(max_examples=30, deadline=None)
def test_roundtrip_all_dtypes_ranks(tmp_path_factory, rank, code, seed):
    r = np.random.default_rng(seed)
    shape = tuple(int(s) for s in r.integers(1, 5, rank))
    if code == "u1":
        x = r.integers(0, 256, shape).astype(np.uint8)
    else:
        x = r.standard_normal(shape).astype(code)
    p = tmp_path_factory.mktemp("rt") / "t.imdt"
    write_tensor(p, x)
    y = read_tensor(p)
    assert y.dtype == x.dtype and y.shape == x.shape
    assert x.tobytes() == y.tobytes()


def test_empty_file_rejected(tmp_path):
    p = tmp_path / "empty.imdt"
    p.write_bytes(b"")
    with pytest.raises(TensorFormatError):
        read_tensor(p)


def test_bad_magic_reports_offset(tmp_path):
    p = tmp_path / "bad.imdt"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(TensorFormatError, match="offset 0"):
        read_tensor(p)


def test_truncated_payload_rejected(tmp_path):
    # header says 2x3 f32 (needs 24 bytes) but only 20 follow
    p = tmp_path / "trunc.imdt"
    header = b"IMDT" + bytes([1, 0, 2]) + struct.pack("<II", 2, 3)
    p.write_bytes(header + bytes(20))
    with pytest.raises(TensorFormatError, match="truncat"):
        read_tensor(p)


def test_rank_limit(tmp_path):
    with pytest.raises(TensorFormatError):
        write_tensor(tmp_path / "r5.imdt", np.zeros((1, 1, 1, 1, 1), dtype=np.float32))


def test_non_finite_rejected(tmp_path):
    with pytest.raises(TensorFormatError):
        write_tensor(tmp_path / "nan.imdt", np.array([np.nan], dtype=np.float32))


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(TensorFormatError):
        write_tensor(tmp_path / "i8.imdt", np.zeros(3, dtype=np.int64))


def test_sidecar_roundtrip(tmp_path):
    p = tmp_path / "t.imdt"
    write_tensor(p, np.zeros(2, dtype=np.float32))
    write_sidecar(p, name="feat", stride=8, image_id="img0")
    meta = read_sidecar(p)
    assert meta == {"name": "feat", "stride": 8, "image_id": "img0"}
