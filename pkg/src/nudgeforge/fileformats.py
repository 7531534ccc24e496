"""Binary snapshot ("NNNS") and checkpoint ("NNNC") files.

All integers are little-endian u32; payloads are little-endian row-major.

Snapshot layout::

    b"NNNS" | version | precision (4 or 8) | rank | extents[rank] | payload

Checkpoint layout::

    b"NNNC" | version | len + UTF-8 header | tensor count |
    per tensor: len + UTF-8 name | rank | extents[rank] | payload

The checkpoint header is a JSON document; its ``"dtype"`` entry fixes the
payload precision of every tensor.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

SNAPSHOT_MAGIC = b"NNNS"
CHECKPOINT_MAGIC = b"NNNC"
VERSION = 1

_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def _u32(f):
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("truncated file")
    return struct.unpack("<I", raw)[0]


def _exact(f, n):
    raw = f.read(n)
    if len(raw) != n:
        raise FormatError("truncated file")
    return raw


def _string(f):
    return _exact(f, _u32(f)).decode("utf-8")


def _put_string(buf, s):
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def snapshot_bytes(array):
    a = np.asarray(array)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    precision = a.dtype.itemsize
    buf = io.BytesIO()
    buf.write(SNAPSHOT_MAGIC)
    buf.write(struct.pack("<III", VERSION, precision, a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype=_DTYPES[precision]).tobytes())
    return buf.getvalue()


def write_snapshots(path, array):
    """Write a time-major array (steps x state dims) to ``path``."""
    with open(path, "wb") as f:
        f.write(snapshot_bytes(array))


def read_snapshots(path):
    with open(path, "rb") as f:
        if f.read(4) != SNAPSHOT_MAGIC:
            raise FormatError(f"{path}: not a snapshot file")
        version = _u32(f)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        precision = _u32(f)
        if precision not in _DTYPES:
            raise FormatError(f"{path}: bad precision flag {precision}")
        rank = _u32(f)
        shape = tuple(_u32(f) for _ in range(rank))
        n = int(np.prod(shape)) * precision
        data = _exact(f, n)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return np.frombuffer(data, dtype=_DTYPES[precision]).reshape(shape).copy()


def checkpoint_bytes(header, tensors):
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _put_string(buf, json.dumps(header, sort_keys=True, separators=(",", ":")))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        _put_string(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return buf.getvalue()


def parse_checkpoint(raw):
    f = io.BytesIO(raw)
    if f.read(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file")
    version = _u32(f)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(_string(f))
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    tensors = {}
    for _ in range(_u32(f)):
        name = _string(f)
        rank = _u32(f)
        shape = tuple(_u32(f) for _ in range(rank))
        data = _exact(f, int(np.prod(shape)) * dtype.itemsize)
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if f.read(1):
        raise FormatError("trailing bytes after checkpoint payload")
    return header, tensors
