"""Little-endian named-tensor container used by checkpoints.

Layout::

    magic   8 bytes  b"GTFMNTSR"
    version u16
    count   u32
    entries, each:
        name_len u16, name utf-8
        dtype    u8   (1 = float32, 2 = float64)
        rank     u8
        extents  rank x u64
        payload  row-major, little-endian
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"GTFMNTSR"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def write_tensors(fh: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<HI", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("unexpected end of tensor container")
    return buf


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    if _read_exact(fh, len(MAGIC)) != MAGIC:
        raise FormatError("not a tensor container (bad magic)")
    version, count = struct.unpack("<HI", _read_exact(fh, 6))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, name_len).decode("utf-8")
        code, rank = struct.unpack("<BB", _read_exact(fh, 2))
        if code not in _CODE_DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(_read_exact(fh, nbytes), dtype=dtype).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="))
    return out


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    return read_tensors(io.BytesIO(blob))
