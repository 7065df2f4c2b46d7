"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"KSEG"  uint32 version
    uint32 descriptor length, descriptor JSON (utf-8)
    uint32 entry count
    per entry: uint16 name length, name (utf-8), uint8 ndim, uint32 * ndim extents,
               uint8 flags (bit 0 trainable, bit 1 batch-norm running statistic),
               float32 elements in C order

Elements are stored as float32, so a float32 model round-trips bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .base import MODEL_KINDS, ModelGraph, config_from_dict

MAGIC = b"KSEG"
VERSION = 1
TRAINABLE = 1
STATISTIC = 2


def _entries(graph: ModelGraph):
    for name, p in graph.params.items():
        yield name, p.data, TRAINABLE if p.requires_grad else 0
    for name, s in graph.stats.items():
        yield name + ".running_mean", s.mean, STATISTIC
        yield name + ".running_var", s.var, STATISTIC


def dumps(graph: ModelGraph) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    desc = json.dumps(graph.descriptor(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(desc)))
    buf.write(desc)
    entries = list(_entries(graph))
    buf.write(struct.pack("<I", len(entries)))
    for name, arr, flags in entries:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", flags))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(graph: ModelGraph, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(graph))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> ModelGraph:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a KSEG checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    desc = json.loads(r.take(n).decode())
    from .. import occlusion  # noqa: F401  (registers the discriminator kind)

    cls = MODEL_KINDS.get(desc.get("kind"))
    if cls is None:
        raise CheckpointError(f"unknown architecture {desc.get('kind')!r}")
    graph = cls(config_from_dict(cls.config_cls, desc["config"]), seed=desc["seed"])
    expected = {name for name, _, _ in _entries(graph)}
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (flags,) = r.unpack("<B")
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        _assign(graph, name, arr, flags)
        seen.add(name)
    if seen != expected:
        raise CheckpointError(f"checkpoint entries do not match architecture: {sorted(expected ^ seen)[:5]}")
    return graph


def _assign(graph: ModelGraph, name: str, arr: np.ndarray, flags: int) -> None:
    if flags & STATISTIC:
        base, _, field = name.rpartition(".")
        stats = graph.stats.get(base)
        if stats is None or field not in ("running_mean", "running_var"):
            raise CheckpointError(f"unexpected statistic {name!r}")
        current = stats.mean if field == "running_mean" else stats.var
        if current.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}")
        if field == "running_mean":
            stats.mean = arr
        else:
            stats.var = arr
        return
    p = graph.params.get(name)
    if p is None or p.shape != arr.shape:
        raise CheckpointError(f"architecture mismatch at parameter {name!r}")
    p.data = arr
    p.requires_grad = bool(flags & TRAINABLE)


def load_checkpoint(path) -> ModelGraph:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
