"""Raw little-endian array bundles with a plain-text header.

Layout of a bundle file:

    SRSTACK-ARRAYS v1\\n
    <meta JSON, one line, canonical>\\n
    <manifest JSON, one line: [{"name","dtype","shape","offset"}, ...]>\\n
    DATA\\n
    <raw array bytes back to back, offsets relative to the end of DATA>

Everything is canonicalized (sorted meta keys, compact separators, arrays
written in manifest order), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"SRSTACK-ARRAYS v1\n"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def _le_dtype(arr: np.ndarray) -> np.dtype:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    return dt


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    manifest = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=_le_dtype(np.asarray(arr)))
        blob = arr.tobytes()
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(canonical_json(meta or {}).encode() + b"\n")
        fh.write(canonical_json(manifest).encode() + b"\n")
        fh.write(b"DATA\n")
        for blob in blobs:
            fh.write(blob)


def load_arrays(path, mmap: bool = False) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path} is not an array bundle")
        meta = json.loads(fh.readline())
        manifest = json.loads(fh.readline())
        if fh.readline() != b"DATA\n":
            raise ValueError(f"{path}: corrupt header")
        data_start = fh.tell()
        arrays: dict[str, np.ndarray] = {}
        if mmap:
            raw = np.memmap(path, mode="r", dtype=np.uint8, offset=data_start)
            for ent in manifest:
                dt = np.dtype(ent["dtype"])
                n = int(np.prod(ent["shape"], dtype=np.int64)) * dt.itemsize
                view = raw[ent["offset"] : ent["offset"] + n].view(dt).reshape(ent["shape"])
                arrays[ent["name"]] = view
        else:
            for ent in manifest:
                dt = np.dtype(ent["dtype"])
                count = int(np.prod(ent["shape"], dtype=np.int64))
                fh.seek(data_start + ent["offset"])
                arrays[ent["name"]] = np.fromfile(fh, dtype=dt, count=count).reshape(ent["shape"])
    return arrays, meta
