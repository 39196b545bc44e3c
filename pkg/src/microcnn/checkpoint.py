"""Binary checkpoint format (``.mcn1``).

All integers are little-endian::

    magic            4 bytes   b"MCN1"
    version          u32       currently 1
    descriptor_len   u32
    descriptor       UTF-8     canonical JSON (sorted keys, no whitespace)
    tensor_count     u32
    tensor_count times:
        name_len     u16
        name         UTF-8
        rank         u32
        dims         u32 * rank
        data         float32 * prod(dims), row-major
    crc32            u32       zlib CRC-32 of every preceding byte

The descriptor records the input shape, the layer stack (kind, name and
constructor config) and free-form metadata such as class names.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib

import numpy as np

from .layers import LAYER_TYPES
from .model import Sequential

MAGIC = b"MCN1"
VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class FormatError(CheckpointError):
    """Not a checkpoint file (bad magic or malformed structure)."""


class VersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class TruncatedError(CheckpointError):
    """File ends before the structure it declares."""


class ChecksumError(CheckpointError):
    """Stored CRC-32 does not match the file contents."""


def describe(model: Sequential) -> str:
    desc = {
        "input_shape": list(model.input_shape),
        "layers": [{"kind": layer.kind, "name": layer.name, "config": layer.config()}
                   for layer in model.layers],
        "meta": model.meta,
    }
    return json.dumps(desc, sort_keys=True, separators=(",", ":"))


def dumps(model: Sequential) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    desc = describe(model).encode("utf-8")
    out += struct.pack("<I", len(desc)) + desc
    tensors = model.named_tensors()
    out += struct.pack("<I", len(tensors))
    for name, t in tensors:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape)
        out += np.ascontiguousarray(t, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def save(model: Sequential, path) -> None:
    data = dumps(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.end = end
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedError(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, "
                f"only {self.end - self.pos} left")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> Sequential:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 8:
        raise TruncatedError("checkpoint truncated inside the header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    # the last 4 bytes are the CRC; everything before is the body
    rd = _Reader(buf, max(len(buf) - 4, 8))
    rd.pos = 8
    (dlen,) = rd.unpack("<I")
    try:
        desc = json.loads(rd.take(dlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        _verify_crc(buf, rd.end)
        raise FormatError(f"unreadable architecture descriptor: {exc}") from None
    (count,) = rd.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8", errors="replace")
        (rank,) = rd.unpack("<I")
        dims = rd.unpack(f"<{rank}I")
        data = rd.take(4 * math.prod(dims))
        tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
    if len(buf) < rd.pos + 4:
        raise TruncatedError("checkpoint truncated before the CRC-32 trailer")
    if rd.pos != rd.end:
        _verify_crc(buf, rd.end)
        raise FormatError(f"{rd.end - rd.pos} unexpected bytes after the last tensor")
    _verify_crc(buf, rd.end)
    return _rebuild(desc, tensors)


def _verify_crc(buf: bytes, end: int):
    (stored,) = struct.unpack_from("<I", buf, end)
    actual = zlib.crc32(buf[:end])
    if stored != actual:
        raise ChecksumError(f"CRC-32 mismatch: stored {stored:#010x}, computed {actual:#010x}")


def _rebuild(desc: dict, tensors: dict) -> Sequential:
    try:
        layers = []
        for spec in desc["layers"]:
            cls = LAYER_TYPES[spec["kind"]]
            layers.append(cls(name=spec["name"], **spec["config"]))
        model = Sequential(desc["input_shape"], layers, meta=desc.get("meta"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid architecture descriptor: {exc}") from None
    expected = dict(model.named_tensors())
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise FormatError(f"tensor records do not match architecture "
                          f"(missing {missing}, unexpected {extra})")
    for name, target in expected.items():
        if target.shape != tensors[name].shape:
            raise FormatError(f"{name}: stored shape {tensors[name].shape}, "
                              f"architecture needs {target.shape}")
        target[...] = tensors[name]
    return model


def load(path) -> Sequential:
    with open(path, "rb") as fh:
        return loads(fh.read())
