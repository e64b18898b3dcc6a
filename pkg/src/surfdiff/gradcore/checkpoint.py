"""Parameter checkpoint file: JSON manifest + raw little-endian float32 blob.

Layout:
    8 bytes   magic b"SDCKPT1\\n"
    8 bytes   little-endian uint64, manifest length in bytes
    manifest  UTF-8 JSON: {"meta": {...}, "entries": [{name, shape, offset}]}
    blob      concatenated float32 values, little-endian, C order

Offsets are byte offsets into the blob.  Writes go to a temp file in the
same directory followed by an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"SDCKPT1\n"


def save_checkpoint(path: str, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float32))
        raw = arr.astype("<f4", copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"meta": meta or {}, "entries": entries}, sort_keys=True
    ).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict, dict]:
    """Returns (arrays, meta)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        blob = f.read()
    arrays = {}
    for ent in manifest["entries"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        arrays[ent["name"]] = arr.reshape(shape).astype(np.float32)
    return arrays, manifest.get("meta", {})
