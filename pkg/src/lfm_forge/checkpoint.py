"""LFT1 named-tensor container.

Layout (little-endian)::

    b"LFT1" | u32 count | count x (u16 name_len | name utf-8 | u8 dtype | u8 ndim | ndim x u64 | data)

Only dtype 0 (float32) exists. Tensor order is preserved.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError

MAGIC = b"LFT1"
DTYPES = {0: np.dtype("<f4")}

Checkpoint = dict  # name -> np.ndarray


def dumps(ckpt: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(ckpt)))
    for name, arr in ckpt.items():
        arr = np.asarray(arr)
        code = 0 if arr.dtype.kind == "f" and arr.dtype.itemsize == 4 else None
        if code is None:
            raise InputError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise InputError(f"tensor name longer than 65535 bytes: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise InputError(f"{name}: too many dimensions")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    mv = memoryview(data)

    def take(n, what):
        nonlocal off
        if off + n > len(mv):
            raise ParseError(f"truncated while reading {what}")
        chunk = mv[off : off + n]
        off += n
        return chunk

    off = 0
    if bytes(take(4, "magic")) != MAGIC:
        raise ParseError("not an LFT1 container")
    (count,) = struct.unpack("<I", take(4, "count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, "dtype"))
        if code not in DTYPES:
            raise ParseError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        dtype = DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(take(n * dtype.itemsize, "data"), dtype=dtype).reshape(shape)
        if name in out:
            raise ParseError(f"duplicate tensor name {name!r}")
        out[name] = arr.astype(np.float32)
    if off != len(mv):
        raise ParseError(f"{len(mv) - off} trailing bytes")
    return out


def save(path, ckpt: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    try:
        return loads(data)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None
