"""Binary dataset container for demonstrations.

Layout (little-endian)::

    magic "GHPDATA\\0" | version u32 | n_demos u32
    n_demos records, each:
        payload_len u64 | crc32(payload) u32 | payload

    payload:
        meta_len u32 | meta JSON (instruction, dt, demo meta)
        T u32 | actions f64[T * 9]
        n_tokens u32 | tokens u32[n_tokens]
        n_keyposes u32 | keyposes u32[n_keyposes]
        n_tuples u32 | (t u32, target u32)[n_tuples]
        n_scenes u32 | obs_scene u32[T] | scene blocks (see ``scene.encode_scene``)
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .keyposes import ACTION_DIM, Demonstration, make_tuples
from .scene import decode_scene, encode_scene

MAGIC = b"GHPDATA\x00"
VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class DemoRecord:
    demo: Demonstration
    keyposes: list[int]

    @property
    def tuples(self):
        return make_tuples(self.demo, self.keyposes)


def _u32s(values) -> bytes:
    values = list(values)
    return struct.pack(f"<I{len(values)}I", len(values), *values)


def encode_record(demo: Demonstration, keyposes: Sequence[int]) -> bytes:
    meta = json.dumps(
        {"instruction": demo.instruction, "dt": demo.dt, "meta": demo.meta}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    out = bytearray(struct.pack("<I", len(meta)) + meta)
    out += struct.pack("<I", len(demo)) + np.ascontiguousarray(demo.actions, dtype="<f8").tobytes()
    out += _u32s(int(t) for t in demo.tokens)
    out += _u32s(int(k) for k in keyposes)
    tuples = make_tuples(demo, keyposes)
    out += struct.pack("<I", len(tuples))
    for tp in tuples:
        out += struct.pack("<II", tp.t, tp.target_t)
    # shared observation sets are stored once
    scenes: list[int] = []
    index = []
    for obs in demo.observations:
        key = id(obs)
        if key not in scenes:
            scenes.append(key)
        index.append(scenes.index(key))
    by_id = {id(o): o for o in demo.observations}
    out += struct.pack("<I", len(scenes)) + struct.pack(f"<{len(index)}I", *index)
    for key in scenes:
        out += encode_scene(by_id[key])
    return bytes(out)


def decode_record(payload: bytes) -> DemoRecord:
    pos = 0

    def take(fmt: str):
        nonlocal pos
        vals = struct.unpack_from(fmt, payload, pos)
        pos += struct.calcsize(fmt)
        return vals

    (meta_len,) = take("<I")
    meta = json.loads(payload[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (T,) = take("<I")
    actions = np.frombuffer(payload, "<f8", T * ACTION_DIM, pos).reshape(T, ACTION_DIM).astype(np.float64)
    pos += 8 * T * ACTION_DIM
    (n,) = take("<I")
    tokens = np.array(take(f"<{n}I"), dtype=np.int64)
    (n,) = take("<I")
    keyposes = list(take(f"<{n}I"))
    (n,) = take("<I")
    tuple_pairs = [take("<II") for _ in range(n)]
    (n_scenes,) = take("<I")
    index = take(f"<{T}I")
    scenes = []
    for _ in range(n_scenes):
        views, pos = decode_scene(payload, pos)
        scenes.append(views)
    if pos != len(payload):
        raise DatasetError("trailing bytes in record")
    demo = Demonstration([scenes[i] for i in index], actions, meta["instruction"], tokens, meta["dt"], meta["meta"])
    derived = [(tp.t, tp.target_t) for tp in make_tuples(demo, keyposes)] if keyposes else []
    if derived != [tuple(p) for p in tuple_pairs]:
        raise DatasetError("stored training tuples disagree with the stored keyposes")
    return DemoRecord(demo, keyposes)


def dumps(records: Sequence[DemoRecord | tuple[Demonstration, Sequence[int]]]) -> bytes:
    out = bytearray(MAGIC) + struct.pack("<II", VERSION, len(records))
    for rec in records:
        demo, keys = (rec.demo, rec.keyposes) if isinstance(rec, DemoRecord) else rec
        payload = encode_record(demo, keys)
        out += struct.pack("<QI", len(payload), zlib.crc32(payload)) + payload
    return bytes(out)


def loads(blob: bytes) -> list[DemoRecord]:
    if blob[:8] != MAGIC:
        raise DatasetError("not a dataset file (bad magic)")
    if len(blob) < 16:
        raise DatasetError("truncated dataset header")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise DatasetError(f"dataset version {version} is not supported (expected {VERSION})")
    pos = 16
    records = []
    for i in range(count):
        if pos + 12 > len(blob):
            raise DatasetError(f"record {i}: truncated header")
        length, crc = struct.unpack_from("<QI", blob, pos)
        pos += 12
        payload = blob[pos : pos + length]
        if len(payload) != length:
            raise DatasetError(f"record {i}: truncated payload ({len(payload)} of {length} bytes)")
        if zlib.crc32(payload) != crc:
            raise DatasetError(f"record {i}: checksum mismatch")
        try:
            records.append(decode_record(payload))
        except (struct.error, ValueError) as exc:
            raise DatasetError(f"record {i}: {exc}") from exc
        pos += length
    if pos != len(blob):
        raise DatasetError(f"{len(blob) - pos} trailing bytes after record {count - 1}")
    return records


def write_dataset(path: str | Path, records: Sequence[DemoRecord | tuple[Demonstration, Sequence[int]]]) -> None:
    Path(path).write_bytes(dumps(records))


def read_dataset(path: str | Path) -> list[DemoRecord]:
    return loads(Path(path).read_bytes())
