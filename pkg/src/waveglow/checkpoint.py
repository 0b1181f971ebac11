"""Binary checkpoint container.

Layout::

    b"WGLOWCKP"                 8-byte magic
    u64 little-endian           manifest length in bytes
    manifest                    UTF-8 JSON: format version, tensor table, metadata
    body                        raw little-endian tensors, in table order
    u64 little-endian           BLAKE2b-64 checksum of the body

Each tensor-table entry records name, shape, dtype, byte offset (relative to
the body start) and byte length.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"WGLOWCKP"
VERSION = 1
_DTYPES = {"f4": "<f4", "f8": "<f8"}


def body_checksum(body: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "little")


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = {4: "f4", 8: "f8"}.get(arr.dtype.itemsize) if arr.dtype.kind == "f" else None
        if key is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": key, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    body = b"".join(chunks)
    manifest = json.dumps({"format": "waveglow-checkpoint", "version": VERSION,
                           "tensors": table, "meta": meta or {}}).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        fh.write(body)
        fh.write(struct.pack("<Q", body_checksum(body)))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: cannot read checkpoint ({e})") from e
    if len(raw) < 24 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    start = 16 + mlen
    if start + 8 > len(raw):
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable manifest ({e})") from e
    if manifest.get("version") != VERSION:
        raise FormatError(f"{path}: checkpoint version={manifest.get('version')}, expected {VERSION}")
    body = raw[start:-8]
    (stored,) = struct.unpack("<Q", raw[-8:])
    if body_checksum(body) != stored:
        raise FormatError(f"{path}: checksum mismatch, file is corrupt")
    tensors = {}
    for entry in manifest["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(body):
            raise FormatError(f"{path}: tensor {entry['name']} runs past the body")
        arr = np.frombuffer(body[lo:lo + n], dtype=_DTYPES[entry["dtype"]])
        native = np.float32 if entry["dtype"] == "f4" else np.float64
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(native)
    return tensors, manifest["meta"]
