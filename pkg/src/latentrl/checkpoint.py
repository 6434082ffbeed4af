"""Self-describing binary container for named float64 arrays.

Byte layout (all integers little-endian)::

    0   8 bytes   magic  b"LATRLCK\\x00"
    8   uint32    format version (currently 1)
    12  uint32    header length H in bytes
    16  uint32    CRC-32 of the header bytes
    20  H bytes   UTF-8 JSON header
    20+H          payload: each array as little-endian float64, C order

The JSON header is ``{"meta": {...}, "tensors": [entry, ...]}`` where each
entry is ``{"name", "shape", "offset", "nbytes", "crc32"}`` and ``offset`` is
relative to the start of the payload. Arrays round-trip bit-exactly.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"LATRLCK\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIII")


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(blob), "crc32": zlib.crc32(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header), zlib.crc32(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc.strerror})") from None
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated before the header prefix")
    magic, version, hlen, hcrc = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {VERSION})")
    start = _PREFIX.size
    header = raw[start:start + hlen]
    if len(header) != hlen:
        raise CheckpointError(f"{path}: header truncated ({len(header)} of {hlen} bytes)")
    if zlib.crc32(header) != hcrc:
        raise CheckpointError(f"{path}: header checksum mismatch")
    try:
        doc = json.loads(header)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON ({exc})") from None
    payload = raw[start + hlen:]
    arrays = {}
    for entry in doc["tensors"]:
        name, lo, n = entry["name"], entry["offset"], entry["nbytes"]
        blob = payload[lo:lo + n]
        if len(blob) != n:
            raise CheckpointError(f"{path}: tensor {name!r} truncated ({len(blob)} of {n} bytes)")
        if zlib.crc32(blob) != entry["crc32"]:
            raise CheckpointError(f"{path}: tensor {name!r} checksum mismatch")
        arrays[name] = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(entry["shape"])
    return doc["meta"], arrays
