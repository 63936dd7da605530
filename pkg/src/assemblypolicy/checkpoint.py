"""Checkpoint files: a JSON header followed by little-endian float32 blobs.

Layout::

    b"APCK" | uint64 header length (LE) | UTF-8 JSON header | blobs

The header lists every tensor's name, shape, dtype and byte offset
relative to the start of the blob section, plus free-form ``meta``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"APCK"


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12:12 + hlen])
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        if e["dtype"] != "float32":
            raise CheckpointError(f"{path}: unsupported dtype {e['dtype']}")
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        expected = 4 * int(np.prod(e["shape"], dtype=np.int64))
        if len(raw) != expected:
            raise CheckpointError(f"{path}: tensor {e['name']} truncated")
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
    return header["meta"], tensors
