"""FTZ tensor files: 8-byte magic, length-prefixed JSON header, raw scalars.

Layout, byte for byte:

* magic ``b"FFVTTNSR"``
* header length as unsigned 32-bit little-endian
* UTF-8 JSON header ``{"dtype": "f32"|"f64", "shape": [...]}``
* payload: row-major scalars, little-endian, f32 or f64 per the header

Used for weights, dataset images, and attention dumps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FtzError

MAGIC = b"FFVTTNSR"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def dumps(array: np.ndarray) -> bytes:
    """Serialize one array to FTZ bytes."""
    arr = np.asarray(array)
    if arr.dtype not in _NAMES:
        raise FtzError(f"FTZ stores f32/f64 tensors only, got dtype {arr.dtype}")
    header = json.dumps(
        {"dtype": _NAMES[arr.dtype], "shape": list(arr.shape)},
        separators=(",", ":"),
    ).encode("utf-8")
    payload = np.ascontiguousarray(arr).astype(_DTYPES[_NAMES[arr.dtype]], copy=False)
    return MAGIC + struct.pack("<I", len(header)) + header + payload.tobytes(order="C")


def loads(blob: bytes) -> np.ndarray:
    """Parse FTZ bytes back into a numpy array."""
    if len(blob) < len(MAGIC) + 4:
        raise FtzError("truncated FTZ data")
    if blob[: len(MAGIC)] != MAGIC:
        raise FtzError(f"bad FTZ magic {blob[:len(MAGIC)]!r}")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    hstart = len(MAGIC) + 4
    if len(blob) < hstart + hlen:
        raise FtzError("truncated FTZ header")
    try:
        header = json.loads(blob[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FtzError(f"unreadable FTZ header: {exc}") from exc
    dtype_name = header.get("dtype")
    if dtype_name not in _DTYPES:
        raise FtzError(f"unknown FTZ dtype {dtype_name!r}")
    shape = tuple(int(s) for s in header.get("shape", ()))
    dtype = _DTYPES[dtype_name]
    count = int(np.prod(shape)) if shape else 1
    payload = blob[hstart + hlen:]
    if len(payload) != count * dtype.itemsize:
        raise FtzError(
            f"payload holds {len(payload)} bytes, expected {count * dtype.itemsize}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    # native byte order, writable copy
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write(path, array: np.ndarray) -> None:
    Path(path).write_bytes(dumps(array))


def read(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
