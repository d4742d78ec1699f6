"""Checkpoint blobs: magic, u64 header length, JSON header, raw little-endian float64 data."""

from __future__ import annotations

import json
import struct
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

MAGIC = b"SSODCKP1"


def to_bytes(arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size * 8
    header = json.dumps({"format": 1, "tensors": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def from_bytes(blob: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise ValueError("not a checkpoint blob")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = np.frombuffer(blob, dtype="<f8", count=e["count"], offset=start)
        arrays[e["name"]] = raw.reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]


def save(path: str, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(arrays, meta))


def load(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
