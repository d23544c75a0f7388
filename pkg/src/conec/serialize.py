"""Versioned binary container: magic, JSON header, float64 little-endian blob.

Layout::

    magic (ASCII, fixed per file kind)
    uint32 LE  header length in bytes
    header     UTF-8 JSON, holds user metadata and the array table
    blob       every array as float64 LE, in array-table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from conec.errors import InvalidInputError


def write_container(path, magic: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    table = []
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic.encode("ascii"))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_container(path, magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    m = magic.encode("ascii")
    if not raw.startswith(m):
        raise InvalidInputError(f"{path}: not a {magic} file")
    pos = len(m)
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        pos += 8 * n
    if pos != len(raw):
        raise InvalidInputError(f"{path}: {len(raw) - pos} trailing bytes")
    return header["meta"], arrays
