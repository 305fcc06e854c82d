"""Versioned binary container for named tensors.

Byte layout (all integers little-endian)::

    offset 0   4 bytes   magic b"STCK"
    offset 4   uint32    format version (1)
    offset 8   uint64    header length H
    offset 16  H bytes   UTF-8 JSON header, keys sorted:
                         {"config": {...}, "meta": {...},
                          "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    16 + H     ...       tensor payloads, C order, little-endian, back to back;
                         "offset" is relative to the start of this region

``dtype`` is a numpy type string (``<f8``, ``<f4``, ``<i8``). Files are
written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"STCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def save_container(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], config: dict | None = None,
                   meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in tensors:
        arr = _le(np.asarray(tensors[name]))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config or {}, "meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC + struct.pack("<IQ", VERSION, len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Returns ``(tensors, config, meta)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated payload for tensor {e['name']!r}")
        arr = np.frombuffer(data[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, header["config"], header["meta"]


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
