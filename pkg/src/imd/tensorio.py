"""Bit-exact tensor interchange format (IMDT).

Layout: magic ``IMDT`` (4 bytes), version u8 = 1, dtype code u8
(0 = f32, 1 = f64, 2 = u8), rank u8, shape as rank x u32 little-endian,
then the row-major payload. Round-trips are bitwise exact for every
supported dtype and rank 1-4.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IMDT"
VERSION = 1
MAX_RANK = 4

_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_BY_KIND = {("f", 4): 0, ("f", 8): 1, ("u", 1): 2}


class TensorFormatError(ValueError):
    """Malformed IMDT payload; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _dtype_code(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _CODE_BY_KIND:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; use float32, float64, or uint8", 5)
    return _CODE_BY_KIND[key]


def write_tensor(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim < 1 or data.ndim > MAX_RANK:
        raise TensorFormatError(f"rank must be 1-{MAX_RANK}, got {data.ndim}", 6)
    code = _dtype_code(data)
    if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
        raise TensorFormatError("refusing to serialize non-finite values", 7)
    # Force little-endian on disk regardless of host order.
    payload = np.ascontiguousarray(data, dtype=_DTYPE_BY_CODE[code])
    header = MAGIC + struct.pack("<BBB", VERSION, code, data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    Path(path).write_bytes(header + payload.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise TensorFormatError("bad magic", 0)
    if len(raw) < 7:
        raise TensorFormatError("truncated header", len(raw))
    version, code, rank = struct.unpack_from("<BBB", raw, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", 4)
    if code not in _DTYPE_BY_CODE:
        raise TensorFormatError(f"unknown dtype code {code}", 5)
    if rank < 1 or rank > MAX_RANK:
        raise TensorFormatError(f"rank {rank} outside 1-{MAX_RANK}", 6)
    shape_end = 7 + 4 * rank
    if len(raw) < shape_end:
        raise TensorFormatError("truncated shape block", len(raw))
    shape = struct.unpack_from(f"<{rank}I", raw, 7)
    dtype = _DTYPE_BY_CODE[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(raw) - shape_end
    if actual != expected:
        kind = "truncated" if actual < expected else "oversized"
        raise TensorFormatError(
            f"{kind} payload: shape {shape} needs {expected} bytes, found {actual}",
            shape_end + min(actual, expected),
        )
    return np.frombuffer(raw, dtype=dtype, offset=shape_end).reshape(shape).copy()


def sidecar_path(tensor_path) -> Path:
    return Path(str(tensor_path) + ".json")


def write_sidecar(tensor_path, name: str, stride: int, image_id: str) -> None:
    meta = {"name": name, "stride": int(stride), "image_id": image_id}
    sidecar_path(tensor_path).write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_sidecar(tensor_path) -> dict:
    return json.loads(sidecar_path(tensor_path).read_text())
