"""Checkpoint files.

Layout (all integers little-endian)::

    b"DSCN" | u16 version | u32 len | JSON (config, groups)
    repeated: u32 name_len | name | u32 rank | u32 dims[rank] | f32 payload
    u32 CRC32 of everything before it
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import CheckpointError, ChecksumMismatch, VersionMismatch
from .model import Model, ModelConfig, ParamGroup

MAGIC = b"DSCN"
VERSION = 1


def dumps(model: Model) -> bytes:
    meta = {
        "config": model.config.to_dict(),
        "groups": [
            {"index": g.index, "frozen": g.frozen, "lr_scale": g.lr_scale} for g in model.groups
        ],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes]
    for store in (model.params, model.buffers):
        for name, arr in store.items():
            nb = name.encode("utf-8")
            parts.append(struct.pack("<I", len(nb)))
            parts.append(nb)
            parts.append(struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(data: bytes) -> Model:
    if len(data) < 14 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("checkpoint CRC32 does not match its contents")
    version = struct.unpack_from("<H", body, 4)[0]
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {VERSION}")
    (meta_len,) = struct.unpack_from("<I", body, 6)
    pos = 10 + meta_len
    meta = json.loads(body[10:pos].decode("utf-8"))

    tensors = {}
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", body, pos)
            dims = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(body):
                raise CheckpointError(f"tensor {name!r} payload truncated")
            tensors[name] = np.frombuffer(body, "<f4", count, pos).reshape(dims)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated tensor record: {exc}") from None

    model = Model(ModelConfig(**meta["config"]), seed=0, dtype=np.float32)
    expected = set(model.params) | set(model.buffers)
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise CheckpointError(f"tensor set mismatch; missing {missing}, unexpected {extra}")
    for name, arr in tensors.items():
        store = model.params if name in model.params else model.buffers
        if store[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, expected {store[name].shape}")
        store[name] = arr.astype(np.float32)
    model.groups = [ParamGroup(g["index"], g["frozen"], g["lr_scale"]) for g in meta["groups"]]
    return model


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_checkpoint(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
