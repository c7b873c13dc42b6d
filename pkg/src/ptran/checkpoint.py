"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PTCK" | u32 format version | u64 header length | header (UTF-8 JSON, sorted keys) | payload

The header holds the run metadata, the RNG algorithm id and state, a tensor
directory ``[{name, dtype, shape, offset, nbytes}]`` with offsets relative to
the payload start, and ``payload_crc32``. Tensors are stored C-ordered,
little-endian, in name order.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"PTCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CorruptCheckpoint(ValueError):
    pass


class IncompatibleCheckpoint(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict[str, Any]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def require(self, names) -> None:
        for name in names:
            if name not in self.tensors:
                raise IncompatibleCheckpoint(f"checkpoint has no tensor {name!r}")


def encode_checkpoint(meta: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> bytes:
    directory, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        directory.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = dict(meta)
    header["tensors"] = directory
    header["payload_crc32"] = zlib.crc32(payload)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + payload


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise CorruptCheckpoint(f"{source}: file too short")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptCheckpoint(f"{source}: unsupported format version {version}")
    start = _PREFIX.size + hlen
    if len(buf) < start:
        raise CorruptCheckpoint(f"{source}: truncated header")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{source}: unreadable header ({e})") from None
    payload = buf[start:]
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CorruptCheckpoint(f"{source}: payload checksum mismatch")
    tensors = {}
    for entry in header.pop("tensors"):
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise CorruptCheckpoint(f"{source}: tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload[lo:lo + n], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    header.pop("payload_crc32")
    return Checkpoint(header, tensors)


def save_checkpoint(path, meta: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> None:
    """Write atomically so an interrupted save never clobbers a good file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(meta, tensors))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CorruptCheckpoint(f"{path}: cannot read ({e.strerror or e})") from e
    return decode_checkpoint(buf, str(path))
