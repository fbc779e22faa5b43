"""MGTF: a small named-tensor container.

Layout (all integers little-endian)::

    b"MGTF" | version:u32 | count:u32
    per tensor:
        name_len:u32 | name:utf-8 | dtype:u8 | rank:u32 | dims:u32*rank | data

dtype 0 is float32, dtype 1 is uint16 (token labels). Data is row-major.

A tensor named ``__meta__`` (uint16, one UTF-8 byte per element) carries a
JSON document; :func:`write` / :func:`read` handle it transparently.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MGTF"
VERSION = 1
META_KEY = "__meta__"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2")}


class MGTFError(ValueError):
    pass


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype.kind == "f":
        return 0
    if arr.dtype.kind in "ui":
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise MGTFError("integer tensor does not fit in uint16")
        return 1
    if arr.dtype.kind == "b":
        return 1
    raise MGTFError(f"unsupported dtype {arr.dtype}")


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    items = dict(tensors)
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        items[META_KEY] = np.frombuffer(raw, dtype=np.uint8).astype(np.uint16)
    out = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        name_b = name.encode("utf-8")
        out.append(struct.pack("<I", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<BI", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise MGTFError("malformed file: bad magic bytes")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise MGTFError(f"version mismatch: file has {version}, reader supports {VERSION}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + name_len].decode("utf-8")
            off += name_len
            code, rank = struct.unpack_from("<BI", buf, off)
            off += 5
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            if code not in _DTYPES:
                raise MGTFError(f"malformed file: unknown dtype byte {code}")
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(buf):
                raise MGTFError("malformed file: truncated tensor data")
            tensors[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
            off += nbytes
    except struct.error as exc:
        raise MGTFError(f"malformed file: {exc}") from None
    if off != len(buf):
        raise MGTFError("malformed file: trailing bytes")
    meta = None
    if META_KEY in tensors:
        meta = json.loads(tensors.pop(META_KEY).astype(np.uint8).tobytes().decode("utf-8"))
    return tensors, meta


def write(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def read(path) -> tuple[dict[str, np.ndarray], dict | None]:
    return loads(Path(path).read_bytes())
