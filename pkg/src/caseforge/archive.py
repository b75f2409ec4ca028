"""Portable tensor archive.

Layout (all integers little-endian)::

    magic      4 bytes   b"CFAR"
    version    u32       1
    count      u32       number of records
    record * count:
        name_len   u32, name      utf-8 bytes
        dtype_len  u32, dtype     numpy dtype string, always little-endian ("<f4", "<i8", "|u1")
        ndim       u32, shape     u64 * ndim
        nbytes     u64, data      raw C-order bytes

Used for network parameters, optimizer state and embedding tables.
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CFAR"
VERSION = 1


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if not arr.flags.c_contiguous:   # ascontiguousarray would promote 0-d arrays to 1-d
        arr = arr.copy(order="C")
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def dumps(records: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(records)))
    for name, value in records.items():
        arr = _le(np.asarray(value))
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", len(dtype_b)))
        buf.write(dtype_b)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        raw = arr.tobytes(order="C")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    return buf.getvalue()


def loads(data: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ValueError("not a tensor archive (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise ValueError(f"unsupported archive version {version}")
    pos = 12
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ValueError("truncated archive")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        (n,) = struct.unpack("<I", take(4))
        dtype = np.dtype(bytes(take(n)).decode("ascii"))
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        arr = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(shape)
        out[name] = arr.copy()
    return out


def save(path, records: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(records))


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())
