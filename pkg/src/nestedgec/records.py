"""Binary record files: 4-byte magic, uint32 version, then named float32 arrays.

Each record is ``uint32 name_len, name (UTF-8), uint32 rank, rank x uint64
dims, float32 values``, all little-endian. Text payloads (JSON metadata,
vocabularies) are stored as rank-1 records of their UTF-8 byte values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

VERSION = 1


class RecordFormatError(ValueError):
    pass


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype("<f4")


def decode_text(values: np.ndarray) -> str:
    return values.astype(np.uint8).tobytes().decode("utf-8")


def write_records(path, magic: bytes, records: Mapping[str, np.ndarray], version: int = VERSION) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    chunks = [magic, struct.pack("<I", version)]
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_records(path, magic: bytes, version: int = VERSION) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:4] != magic:
        raise RecordFormatError(f"{path}: not a {magic.decode()} file")
    (found,) = struct.unpack_from("<I", buf, 4)
    if found != version:
        raise RecordFormatError(f"{path}: unsupported version {found} (expected {version})")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def need(n):
        if pos + n > len(buf):
            raise RecordFormatError(f"{path}: truncated file")

    while pos < len(buf):
        need(4)
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(nlen + 4)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(8 * rank)
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(4 * count)
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    return out


def json_record(obj) -> np.ndarray:
    return encode_text(json.dumps(obj, sort_keys=True))


def read_json_record(values: np.ndarray):
    return json.loads(decode_text(values))
