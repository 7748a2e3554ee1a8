"""Binary tensor container.

Layout (all integers little-endian)::

    b"CLAB"  u32 version  u32 count
    count x { u32 name_len, name (UTF-8), u32 rank, rank x u64 dim, f64 payload (row-major) }
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from clab.errors import ContractError

MAGIC = b"CLAB"
VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ContractError("not a CLAB tensor file (bad magic)")
    off = 4
    version, count = struct.unpack_from("<II", buf, off)
    off += 8
    if version != VERSION:
        raise ContractError(f"unsupported CLAB version {version}")
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims)
            off += 8 * n
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ContractError(f"truncated CLAB tensor file: {exc}") from exc
    if off != len(buf):
        raise ContractError("trailing bytes after CLAB payload")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
