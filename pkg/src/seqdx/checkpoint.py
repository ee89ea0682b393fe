"""Portable binary checkpoints.

Layout (all integers little-endian)::

    b"SQDX"                      magic
    u16  version                 currently 1
    u32  n, n bytes              ModelConfig as UTF-8 JSON
    u32  n, n bytes              training state as UTF-8 JSON (may be "{}")
    u32  count                   number of parameter tensors
    per tensor:
        u16 n, n bytes           parameter name (UTF-8)
        u8  rank
        u32 * rank               dimensions
        f32 * prod(dims)         values, row-major
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import ConfigError, Model, ModelConfig, init_model, layer_shapes

MAGIC = b"SQDX"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(CheckpointFormatError):
    pass


def encode_checkpoint(model: Model, state: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for blob in (json.dumps(model.config.to_dict(), sort_keys=True),
                 json.dumps(state or {}, sort_keys=True)):
        raw = blob.encode()
        parts += [struct.pack("<I", len(raw)), raw]
    params = model.named_parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, p in params.items():
        raw = name.encode()
        dims = p.shape
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", len(dims)),
                  struct.pack(f"<{len(dims)}I", *dims),
                  np.ascontiguousarray(p.data, dtype="<f4").tobytes()]
    return b"".join(parts)


def save_checkpoint(model: Model, path, state: dict | None = None):
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(model, state))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes):
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", 4)
    blobs = []
    for what in ("config", "state"):
        (n,) = r.unpack("<I", f"{what} length")
        at = r.pos
        try:
            blobs.append(json.loads(r.take(n, what).decode()))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt {what}: {exc}", at) from None
    try:
        config = ModelConfig.from_dict(blobs[0])
        config.validate()
    except (TypeError, ConfigError) as exc:
        raise CheckpointFormatError(f"invalid model config: {exc}", 6) from None
    expected = layer_shapes(config)
    (count,) = r.unpack("<I", "parameter count")
    if count != len(expected):
        raise CheckpointFormatError(f"expected {len(expected)} tensors, found {count}", r.pos - 4)
    values = {}
    for _ in range(count):
        at = r.pos
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "name").decode(errors="replace")
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        if name not in expected or tuple(dims) != expected[name]:
            raise CheckpointFormatError(f"tensor {name!r} with shape {list(dims)} does not fit config", at)
        size = int(np.prod(dims))
        values[name] = np.frombuffer(r.take(4 * size, f"values of {name}"), dtype="<f4").reshape(dims)
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last tensor", r.pos)
    model = init_model(config, seed=0)
    for name, p in model.named_parameters().items():
        p.data = values[name].astype(np.float32)
    return model, blobs[1]


def read_checkpoint(path):
    """``(model, state)`` from ``path``."""
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path) -> Model:
    return read_checkpoint(path)[0]
