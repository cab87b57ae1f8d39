"""Shared binary container: magic, version, JSON metadata, raw little-endian blobs.

Layout:
    magic            8 bytes
    format version   u32 LE
    json length      u64 LE
    json block       parameter names/shapes/dtypes + free-form metadata
    blobs            raw array bytes in name-sorted order, little-endian

Round-trips are byte-exact: writing the result of a read yields identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"OFERCKPT"
ASSET_MAGIC = b"OFERASST"
DATASET_MAGIC = b"OFERDATA"

_HEADER = struct.Struct("<8sIQ")


def _dtype_tag(dtype):
    return {np.dtype("float32"): "f4", np.dtype("float64"): "f8",
            np.dtype("int64"): "i8", np.dtype("int32"): "i4",
            np.dtype("bool"): "b1"}[np.dtype(dtype)]


def write_container(path, magic: bytes, arrays: dict, metadata: dict | None = None):
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    names = sorted(arrays)
    entries = [
        {"name": n, "shape": list(arrays[n].shape), "dtype": _dtype_tag(arrays[n].dtype)}
        for n in names
    ]
    blob = json.dumps(
        {"entries": entries, "metadata": metadata or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, FORMAT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            arr = np.ascontiguousarray(arrays[n])
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_container(path, expect_magic: bytes):
    with open(path, "rb") as f:
        magic, version, jlen = _HEADER.unpack(f.read(_HEADER.size))
        if magic != expect_magic:
            raise ValueError(f"bad magic {magic!r}, expected {expect_magic!r}")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported container version {version}")
        head = json.loads(f.read(jlen).decode("utf-8"))
        arrays = {}
        for e in head["entries"]:
            dt = np.dtype(e["dtype"]).newbyteorder("<")
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            buf = f.read(count * dt.itemsize)
            arrays[e["name"]] = np.frombuffer(buf, dtype=dt).reshape(e["shape"]).astype(np.dtype(e["dtype"]))
    return arrays, head["metadata"]


def save_checkpoint(path, store, metadata: dict | None = None):
    meta = dict(metadata or {})
    meta.setdefault("precision", "f4")
    write_container(path, CHECKPOINT_MAGIC, store.arrays(), meta)


def load_checkpoint(path, store=None):
    arrays, metadata = read_container(path, CHECKPOINT_MAGIC)
    if store is not None:
        store.load_arrays(arrays)
    return arrays, metadata
