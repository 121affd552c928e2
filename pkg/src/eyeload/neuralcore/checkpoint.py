"""Checkpoint file: magic, version, JSON header, then raw little-endian float64 arrays.

Layout::

    b"EYLDCKPT" | uint32 version | uint64 header_len | header (UTF-8 JSON) | arrays

The header carries caller metadata plus an ``arrays`` list of
``{"name", "shape"}`` entries in storage order.  JSON is written with sorted
keys and fixed separators so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import IncompatibleCheckpoint

MAGIC = b"EYLDCKPT"
VERSION = 1


def dumps(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    names = sorted(arrays)
    header = dict(meta)
    header["arrays"] = [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names]
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names]
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise IncompatibleCheckpoint("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise IncompatibleCheckpoint(f"checkpoint version {version}, expected {VERSION}")
    header = json.loads(blob[20 : 20 + hlen].decode("utf-8"))
    offset = 20 + hlen
    arrays = {}
    for entry in header.pop("arrays"):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = data.reshape(entry["shape"]).astype(float)
        offset += 8 * count
    if offset != len(blob):
        raise IncompatibleCheckpoint("trailing bytes after array data")
    return header, arrays


def save(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
