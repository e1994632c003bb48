"""Byte-stable checkpoint container.

Layout (all integers and floats little-endian)::

    magic      8 bytes   b"GHPCKPT\\0"
    version    u32
    meta_len   u64
    meta       UTF-8 JSON, keys sorted, compact separators
    n_arrays   u32
    per array:
        name_len u16, name UTF-8
        ndim u8, dims u64 * ndim
        payload  float64 * prod(dims)
    sha256     32 bytes over everything above

Array names are namespaced: ``param/<name>``, ``adam.m/<name>``,
``adam.v/<name>``.  The JSON meta carries the model config, optimizer step
and the numpy bit-generator state.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"GHPCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)


def _encode_array(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def dumps(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    entries = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    entries += [(f"adam.m/{k}", v) for k, v in ckpt.adam_m.items()]
    entries += [(f"adam.v/{k}", v) for k, v in ckpt.adam_v.items()]
    body = bytearray(MAGIC)
    body += struct.pack("<IQ", VERSION, len(meta)) + meta
    body += struct.pack("<I", len(entries))
    for name, arr in entries:
        body += _encode_array(name, arr)
    body += hashlib.sha256(body).digest()
    return bytes(body)


def loads(blob: bytes) -> Checkpoint:
    if len(blob) < 8 + 12 + 32 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    version, meta_len = struct.unpack_from("<IQ", payload, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 20
    meta = json.loads(payload[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    ckpt = Checkpoint(params={}, meta=meta)
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        name = payload[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", payload, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", payload, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
        kind, _, key = name.partition("/")
        target = {"param": ckpt.params, "adam.m": ckpt.adam_m, "adam.v": ckpt.adam_v}.get(kind)
        if target is None:
            raise CheckpointError(f"unknown array namespace in {name!r}")
        target[key] = arr
    return ckpt


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
