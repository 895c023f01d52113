"""Named-tensor container used for feature caches and checkpoints.

Byte layout, all little-endian::

    magic      4s   b"GEEC"
    version    u16  1
    meta_len   u32  length of the UTF-8 JSON metadata that follows
    meta       bytes
    n_entries  u32
    then per entry:
        name_len u16, name (UTF-8)
        tag_len  u16, tag (UTF-8)   component tag, may be empty
        dtype    u8                 0 = float32, 1 = int64
        ndim     u8
        dims     u64 * ndim
        values   row-major data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"GEEC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("int64"): 1}


class ContainerError(ValueError):
    pass


@dataclass
class Entry:
    name: str
    array: np.ndarray
    tag: str = ""


@dataclass
class Container:
    entries: list[Entry] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, name, array, tag=""):
        array = np.asarray(array)
        if array.dtype.kind == "f":
            array = array.astype(np.float32)
        elif array.dtype.kind in "iub":
            array = array.astype(np.int64)
        else:
            raise ContainerError(f"unsupported dtype {array.dtype} for {name!r}")
        if name in self.names():
            raise ContainerError(f"duplicate entry {name!r}")
        self.entries.append(Entry(name, array, tag))

    def names(self):
        return [e.name for e in self.entries]

    def __getitem__(self, name) -> np.ndarray:
        for e in self.entries:
            if e.name == name:
                return e.array
        raise KeyError(name)

    def __contains__(self, name):
        return name in self.names()

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True).encode()
        out = [struct.pack("<4sHI", MAGIC, VERSION, len(meta)), meta, struct.pack("<I", len(self.entries))]
        for e in self.entries:
            name, tag = e.name.encode(), e.tag.encode()
            arr = np.ascontiguousarray(e.array)
            code = _CODES[arr.dtype]
            out.append(struct.pack("<H", len(name)) + name + struct.pack("<H", len(tag)) + tag)
            out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(arr.astype(_DTYPES[code], copy=False).tobytes(order="C"))
        return b"".join(out)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Container":
        try:
            magic, version, mlen = struct.unpack_from("<4sHI", raw, 0)
            if magic != MAGIC:
                raise ContainerError(f"bad magic {magic!r}")
            if version != VERSION:
                raise ContainerError(f"unsupported container version {version}")
            off = 10
            meta = json.loads(raw[off:off + mlen].decode())
            off += mlen
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            entries = []
            for _ in range(n):
                (ln,) = struct.unpack_from("<H", raw, off)
                name = raw[off + 2:off + 2 + ln].decode()
                off += 2 + ln
                (lt,) = struct.unpack_from("<H", raw, off)
                tag = raw[off + 2:off + 2 + lt].decode()
                off += 2 + lt
                code, ndim = struct.unpack_from("<BB", raw, off)
                off += 2
                shape = struct.unpack_from(f"<{ndim}Q", raw, off)
                off += 8 * ndim
                dt = _DTYPES[code]
                count = int(np.prod(shape, dtype=np.int64))
                if off + count * dt.itemsize > len(raw):
                    raise ContainerError(f"entry {name!r} truncated")
                arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(shape).copy()
                off += count * dt.itemsize
                entries.append(Entry(name, arr, tag))
        except struct.error as exc:
            raise ContainerError(f"truncated container: {exc}") from None
        return cls(entries, meta)

    @classmethod
    def load(cls, path) -> "Container":
        path = Path(path)
        if not path.is_file():
            raise ContainerError(f"{path}: no such file")
        try:
            return cls.from_bytes(path.read_bytes())
        except ContainerError as exc:
            raise ContainerError(f"{path}: {exc}") from None
