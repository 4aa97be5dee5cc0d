"""Little-endian float32 array container with a JSON header.

Layout::

    magic (4 bytes) | header length (uint32 LE) | header (UTF-8 JSON) | payload

The header lists each array as ``{"name", "shape", "offset"}`` where
``offset`` counts bytes from the start of the payload. Used for the identity
pool file, embedding files, the annotation cache and the remote-denoiser
request/response messages.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"LDAF"
_LEN = struct.Struct("<I")
_F32 = np.dtype("<f4")


def pack(arrays: dict, meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=_F32)
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        raw = data.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = {"arrays": entries, "meta": meta or {}}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(head)) + head + b"".join(chunks)


def unpack(blob: bytes) -> tuple[dict, dict]:
    """Inverse of :func:`pack`; returns ``(arrays, meta)`` with float32 arrays."""
    if blob[:4] != MAGIC:
        raise ValueError("not an ldanon array container (bad magic)")
    (hlen,) = _LEN.unpack_from(blob, 4)
    start = 8 + hlen
    try:
        header = json.loads(blob[8:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt container header: {exc}") from exc
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = start + entry["offset"]
        hi = lo + count * _F32.itemsize
        if hi > len(blob):
            raise ValueError(f"array {entry['name']!r} runs past the end of the container")
        arrays[entry["name"]] = np.frombuffer(blob, dtype=_F32, count=count, offset=lo).reshape(shape)
    return arrays, header.get("meta", {})


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, arrays: dict, meta: dict | None = None):
    atomic_write_bytes(path, pack(arrays, meta))


def load(path) -> tuple[dict, dict]:
    return unpack(Path(path).read_bytes())
