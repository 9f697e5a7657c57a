"""Versioned binary container for named float64 arrays.

Layout: 4-byte magic, u32 format version, u32 header length, JSON header
(kind, metadata, array names/shapes in order), then the raw array bytes.
Used for training checkpoints and exported policy weights.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GLAB"
FORMAT_VERSION = 1


class BlobError(ValueError):
    pass


def write_blob(path: str | Path, kind: str, meta: dict,
               arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": [{"name": k, "shape": list(np.asarray(v).shape)}
                   for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype=np.float64).tobytes())
    return path


def read_blob(path: str | Path, expected_kind: str | None = None):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise BlobError(f"{path}: not a recognized array container")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise BlobError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[12:12 + hlen].decode())
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise BlobError(
            f"{path}: expected kind '{expected_kind}', got '{header.get('kind')}'")
    arrays = {}
    off = 12 + hlen
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=np.float64, count=count, offset=off)
        arrays[spec["name"]] = arr.reshape(shape).copy()
        off += count * 8
    if off != len(raw):
        raise BlobError(f"{path}: trailing or missing array bytes")
    return header["meta"], arrays
