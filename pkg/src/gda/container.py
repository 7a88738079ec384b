"""GDAC tensor container.

Layout (all integers little-endian)::

    b"GDAC" | version u32 | record* | checksum u64

    record := name_len u32 | name utf-8 | rank u32 | dims u64 * rank | payload f32 * prod(dims)

The checksum is a 64-bit BLAKE2b digest over the concatenated payload bytes
of every record, in file order.
"""

from __future__ import annotations

import hashlib
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GDAC"
VERSION = 1


class ContainerError(ValueError):
    pass


def encode(records: Mapping[str, np.ndarray]) -> tuple[bytes, dict[str, int]]:
    """Serialize ``records``; returns the bytes and each record's byte offset."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    pos = len(MAGIC) + 4
    digest = hashlib.blake2b(digest_size=8)
    offsets = {}
    for name, arr in records.items():
        arr = np.array(arr, dtype="<f4", order="C")
        if not np.all(np.isfinite(arr)):
            raise ContainerError(f"record {name!r} contains non-finite values")
        raw_name = name.encode("utf-8")
        header = struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<I", arr.ndim)
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload = arr.tobytes()
        offsets[name] = pos
        chunks += [header, payload]
        pos += len(header) + len(payload)
        digest.update(payload)
    chunks.append(digest.digest())
    return b"".join(chunks), offsets


def _read_record(buf: bytes, pos: int) -> tuple[str, np.ndarray, int]:
    try:
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
    except (struct.error, UnicodeDecodeError) as exc:
        raise ContainerError(f"truncated or corrupt record header at byte {pos}") from exc
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = pos + 4 * count
    if end > len(buf) - 8:
        raise ContainerError(f"record {name!r} overruns the container")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
    return name, arr, end


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise ContainerError("not a GDAC container")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported GDAC version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    digest = hashlib.blake2b(digest_size=8)
    pos = 8
    while pos < len(buf) - 8:
        name, arr, pos = _read_record(buf, pos)
        if name in out:
            raise ContainerError(f"duplicate record {name!r}")
        out[name] = arr
        digest.update(arr.astype("<f4").tobytes())
    if pos != len(buf) - 8:
        raise ContainerError("trailing bytes before checksum")
    if digest.digest() != buf[-8:]:
        raise ContainerError("checksum mismatch")
    return out


def save(path: str | os.PathLike, records: Mapping[str, np.ndarray]) -> dict[str, int]:
    """Write atomically (temp file + rename) and return record offsets."""
    data, offsets = encode(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return offsets


def load(path: str | os.PathLike) -> "OrderedDict[str, np.ndarray]":
    return decode(Path(path).read_bytes())


def load_at(path: str | os.PathLike, offset: int) -> tuple[str, np.ndarray]:
    """Read the single record starting at ``offset`` (no checksum verification)."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContainerError("not a GDAC container")
    name, arr, _ = _read_record(buf, int(offset))
    return name, arr
