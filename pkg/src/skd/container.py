"""Binary container for datasets and checkpoints.

Layout: magic "SKD1" | version u32 LE | header length u32 LE | UTF-8 JSON
header | payload. The header declares kind, metadata, and an ordered array
table (name, shape); the payload is the concatenation of those arrays as
row-major little-endian float64. write(read(x)) reproduces bytes exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, ParseError

MAGIC = b"SKD1"
VERSION = 1


@dataclass
class Container:
    kind: str                       # "dataset" | "checkpoint"
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def write_container(path: str, container: Container) -> None:
    names = list(container.arrays)
    table = []
    for name in names:
        arr = np.ascontiguousarray(container.arrays[name], dtype=np.float64)
        container.arrays[name] = arr
        table.append({"name": name, "shape": list(arr.shape)})
    header = {"kind": container.kind, "meta": container.meta, "arrays": table}
    # canonical JSON so identical content yields identical bytes
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for name in names:
            data = container.arrays[name]
            if data.dtype.byteorder == ">":
                data = data.astype("<f8")
            fh.write(data.tobytes())


def read_container(path: str) -> Container:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise ParseError(f"file too short ({len(blob)} bytes) for a container header")
    if blob[:4] != MAGIC:
        raise ParseError(f"bad magic at byte 0: {blob[:4]!r} (expected {MAGIC!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ParseError(f"unsupported container version {version} at byte 4")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    if 12 + hlen > len(blob):
        raise ParseError(f"header length {hlen} at byte 8 exceeds file size")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"corrupt JSON header at byte 12: {e}") from e
    for key in ("kind", "meta", "arrays"):
        if key not in header:
            raise ParseError(f"header missing key {key!r}")
    arrays: dict[str, np.ndarray] = {}
    offset = 12 + hlen
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + nbytes > len(blob):
            raise IntegrityError(
                f"truncated payload: array {entry['name']!r} needs {nbytes} bytes "
                f"at offset {offset}, file has {len(blob)}")
        arrays[entry["name"]] = np.frombuffer(
            blob, dtype="<f8", count=int(np.prod(shape, dtype=np.int64)),
            offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise IntegrityError(f"{len(blob) - offset} trailing bytes after declared payload")
    return Container(kind=header["kind"], meta=header["meta"], arrays=arrays)
