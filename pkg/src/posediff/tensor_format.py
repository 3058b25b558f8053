"""Binary tensor container (``.pdtb``).

Layout, all little-endian::

    magic   b"PDTB"      4 bytes
    version u32          currently 1
    dtype   u8           0 = f32, 1 = u8
    rank    u8           1..4
    dims    u32 * rank
    payload              row-major values

Blobs are plain :class:`numpy.ndarray` objects in memory.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import BadMagic, NonFinite, ShapeMismatch

MAGIC = b"PDTB"
VERSION = 1
MAX_RANK = 4

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}

PathLike = Union[str, os.PathLike]


def _check_array(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}; expected float32 or uint8")
    if not 1 <= arr.ndim <= MAX_RANK:
        raise ShapeMismatch(f"rank must be in 1..{MAX_RANK}, got {arr.ndim}")
    if any(d <= 0 for d in arr.shape):
        raise ShapeMismatch(f"all dims must be positive, got {arr.shape}")
    if arr.dtype == np.float32 and not np.isfinite(arr).all():
        raise NonFinite("float32 blob contains NaN or Inf")
    return arr


def encode_blob(arr: np.ndarray) -> bytes:
    arr = _check_array(arr)
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return header + payload


def decode_blob(buf: bytes) -> np.ndarray:
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise BadMagic(f"not a tensor file (magic {buf[:4]!r})")
    version, code, rank = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise BadMagic(f"unsupported tensor file version {version}")
    if code not in _DTYPES:
        raise BadMagic(f"unknown dtype code {code}")
    if not 1 <= rank <= MAX_RANK:
        raise ShapeMismatch(f"rank {rank} out of range")
    offset = 10
    if len(buf) < offset + 4 * rank:
        raise ShapeMismatch("truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    if any(d == 0 for d in shape):
        raise ShapeMismatch(f"zero-sized dim in {shape}")
    dtype = _DTYPES[code]
    payload = buf[offset:]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise ShapeMismatch(
            f"header shape {list(shape)} needs {expected} payload bytes, found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    arr = arr.astype(dtype.newbyteorder("="), copy=True)
    if code == 0 and not np.isfinite(arr).all():
        raise NonFinite("float32 blob contains NaN or Inf")
    return arr


def write_blob(path: PathLike, arr: np.ndarray) -> None:
    data = encode_blob(arr)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def read_blob(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_blob(fh.read())
