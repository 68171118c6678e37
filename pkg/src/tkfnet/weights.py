"""Binary serialization for named rank-4 float32 tensors.

Layout, all integers little-endian u32:

    magic "TKFW" | version=1 | record count
    per record: name length | utf-8 name | rank=4 | four dims | float32 payload

Round-trips are bit-exact. Readers are strict: wrong magic, unknown
versions, duplicate names, truncation and trailing bytes all raise
``WeightsFormatError`` with the byte offset where parsing failed.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TKFW"
VERSION = 1
_U32 = struct.Struct("<I")


class WeightsFormatError(ValueError):
    """Malformed weights container."""


def _pack_record(name, arr):
    encoded = name.encode("utf-8")
    if not encoded:
        raise ValueError("tensor names must be non-empty")
    if arr.ndim != 4:
        raise ValueError(f"tensor {name!r} must be rank 4, got rank {arr.ndim}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    parts = [_U32.pack(len(encoded)), encoded, _U32.pack(4)]
    parts.extend(_U32.pack(d) for d in arr.shape)
    parts.append(payload.tobytes())
    return b"".join(parts)


def serialize_weights(arrays):
    """Serialize an ordered name -> array mapping to container bytes."""
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(arrays))]
    parts.extend(_pack_record(name, arr) for name, arr in arrays.items())
    return b"".join(parts)


def write_weights(path, arrays):
    Path(path).write_bytes(serialize_weights(arrays))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, count, what):
        end = self.pos + count
        if end > len(self.data):
            raise WeightsFormatError(
                f"truncated {what} at byte {self.pos}: need {count} bytes, "
                f"have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def deserialize_weights(data):
    """Parse container bytes into an ordered name -> float32 array dict."""
    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise WeightsFormatError(f"bad magic {magic!r} at byte 0; expected {MAGIC!r}")
    version = reader.u32("version")
    if version != VERSION:
        raise WeightsFormatError(
            f"unsupported version {version} at byte 4; this reader handles {VERSION}"
        )
    count = reader.u32("record count")
    arrays = {}
    for index in range(count):
        name_start = reader.pos
        name_len = reader.u32("name length")
        if name_len == 0:
            raise WeightsFormatError(f"empty tensor name at byte {name_start}")
        raw_name = reader.take(name_len, "tensor name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightsFormatError(f"undecodable tensor name at byte {name_start}: {exc}") from exc
        if name in arrays:
            raise WeightsFormatError(f"duplicate tensor name {name!r} at byte {name_start}")
        rank_start = reader.pos
        rank = reader.u32("rank")
        if rank != 4:
            raise WeightsFormatError(
                f"tensor {name!r} has rank {rank} at byte {rank_start}; only rank 4 is stored"
            )
        dims = tuple(reader.u32("dimension") for _ in range(4))
        if any(d == 0 for d in dims):
            raise WeightsFormatError(f"tensor {name!r} has zero dimension {dims} at byte {rank_start}")
        size = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(size * 4, f"payload of {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if reader.pos != len(data):
        raise WeightsFormatError(
            f"{len(data) - reader.pos} trailing bytes after record {count} at byte {reader.pos}"
        )
    return arrays


def read_weights(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise WeightsFormatError(f"cannot read {path}: {exc}") from exc
    return deserialize_weights(data)


def write_tensor(path, arr, name="tensor"):
    """Store a single rank-4 array as a one-record container (.rt32)."""
    write_weights(path, {name: np.asarray(arr, dtype=np.float32)})


def read_tensor(path):
    """Read a one-record container back as a float32 array."""
    arrays = read_weights(path)
    if len(arrays) != 1:
        raise WeightsFormatError(
            f"{path}: expected exactly one tensor record, found {len(arrays)}"
        )
    return next(iter(arrays.values()))
