"""Binary tensor container used for model checkpoints and dataset export.

Layout: the 6 magic bytes ``UCHFR1``, a little-endian uint32 with the byte
length of a UTF-8 JSON manifest, the manifest itself, then the raw
little-endian tensor payloads in manifest order. The manifest records a
format version, a free-form ``meta`` dict (stage tag, seed, config hash, ...)
and one ``{name, dtype, shape}`` entry per tensor.

Round trips are bit-exact: payloads are written with ``tobytes`` and read
back with ``frombuffer`` at the recorded dtype.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"UCHFR1"
FORMAT_VERSION = 1

STAGE_PRETRAINED = "pretrained"
STAGE_HFR = "hfr"


class CheckpointError(ValueError):
    pass


def _le_dtype(dt: np.dtype) -> str:
    dt = np.dtype(dt)
    if dt.byteorder == ">":
        raise CheckpointError(f"big-endian dtype {dt} not supported")
    return dt.newbyteorder("<").str


def save_tensors(path, tensors: dict, meta: dict | None = None):
    """Write named arrays to ``path``; iteration order of ``tensors`` is kept."""
    entries = []
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = _le_dtype(arr.dtype)
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payloads.append(np.ascontiguousarray(arr).astype(dtype, copy=False).tobytes())
    manifest = {
        "version": FORMAT_VERSION,
        "meta": dict(meta or {}),
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for payload in payloads:
            f.write(payload)


def load_tensors(path):
    """Read a container back; returns (tensors dict, meta dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (blob_len,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(blob_len).decode("utf-8"))
        if manifest.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {manifest.get('version')}")
        tensors = {}
        for entry in manifest["tensors"]:
            dt = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = f.read(count * dt.itemsize)
            if len(raw) != count * dt.itemsize:
                raise CheckpointError(f"{path}: truncated payload for tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return tensors, manifest["meta"]
