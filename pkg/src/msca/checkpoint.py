"""Little-endian tensor record files.

Layout::

    b"MSCA1"
    repeated until EOF:
        u32   name length in bytes
        bytes UTF-8 name
        u8    element type: b"f" (float32) or b"d" (float64)
        u32   rank
        u64   extent, rank times
        raw   little-endian elements, C order

The same record format backs model checkpoints and precomputed feature files.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"MSCA1"
_CODES = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, object], dtype=None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value))
        if dtype is not None:
            arr = arr.astype(dtype)
        if arr.dtype == np.float64:
            code, le = b"d", arr.astype("<f8", copy=False)
        else:
            code, le = b"f", arr.astype("<f4", copy=False)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(code)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(le).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a tensor record file (bad magic)")
    view = memoryview(blob)
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            code = bytes(view[pos:pos + 1])
            pos += 1
            if code not in _CODES:
                raise CheckpointError(f"record {name!r}: unknown element type {code!r}")
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            dt = _CODES[code]
            count = int(np.prod(shape, dtype=np.int64))
            nbytes = count * dt.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"record {name!r}: truncated data")
            arr = np.frombuffer(blob, dtype=dt, count=count, offset=pos).reshape(shape)
            out[name] = arr.astype(dt.newbyteorder("="))
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated record header: {exc}") from None
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, object], dtype=None) -> None:
    blob = dumps(tensors, dtype=dtype)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
