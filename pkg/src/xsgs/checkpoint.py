"""Checkpoint serialization.

Layout: magic "XSGS", u32 version, u32 config length + canonical-JSON config,
then two record blocks (model parameters, optimizer state), each a u32 count
followed by records of: u16 name length, UTF-8 name, u8 rank, u32 dims,
float32 little-endian data. Records are sorted by name, so serialization is
deterministic and save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"XSGS"
VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"record name too long: {name!r}")
    out = struct.pack("<H", len(raw)) + raw + struct.pack("<B", data.ndim)
    out += struct.pack(f"<{data.ndim}I", *data.shape)
    return out + data.tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _read_records(r: _Reader) -> dict:
    count = r.u32()
    out: dict = {}
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        rank = r.u8()
        dims = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).copy()
        if name in out:
            raise CheckpointError(f"duplicate record name {name!r}")
        out[name] = arr
    return out


def save_checkpoint(config: dict, params: dict, optimizer: dict) -> bytes:
    """Serialize config (JSON-able dict) plus named float arrays."""
    cfg = canonical_json(config).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg]
    for block in (params, optimizer):
        out.append(struct.pack("<I", len(block)))
        for name in sorted(block):
            out.append(_pack_record(name, np.asarray(block[name])))
    return b"".join(out)


def load_checkpoint(data: bytes) -> tuple[dict, dict, dict]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    try:
        config = json.loads(r.take(r.u32()).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    params = _read_records(r)
    optimizer = _read_records(r)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last record")
    return config, params, optimizer
