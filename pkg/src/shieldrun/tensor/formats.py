"""Binary frozen-graph (TSCG) and checkpoint (TSCK) files.

TSCG, little-endian::

    "TSCG" | version u32 | seed u64 | node count u32 | nodes | crc32 u32
    node   = name str16 | op u8 | input count u16 | inputs str16...
             | attr json u32-prefixed | tensor count u16 | (key str16 | tensor)...
    tensor = ndim u8 | dims u32... | float32 data
    str16  = length u16 | utf-8 bytes

The crc covers every byte before it.  TSCK is
``"TSCK" | version u32 | count u32 | (name str16 | tensor)...``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from ..errors import CorruptFile, FormatVersionUnknown
from .graph import OP_KINDS, Graph, Node
from .ops import F32

GRAPH_MAGIC = b"TSCG"
CKPT_MAGIC = b"TSCK"
VERSION = 1


class BlobFS(Protocol):
    def read_file(self, path: str) -> bytes: ...
    def write_file(self, path: str, data: bytes) -> None: ...


class LocalFS:
    def read_file(self, path: str) -> bytes:
        return Path(path).read_bytes()

    def write_file(self, path: str, data: bytes) -> None:
        Path(path).write_bytes(data)


def _str16(s: str) -> bytes:
    b = s.encode()
    if len(b) > 0xFFFF:
        raise ValueError("string too long")
    return struct.pack("<H", len(b)) + b


def _tensor(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    return struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


class _Cursor:
    def __init__(self, data: bytes, pos: int = 0) -> None:
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptFile("file is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def str16(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode()
        except UnicodeDecodeError:
            raise CorruptFile("bad string") from None

    def tensor(self) -> np.ndarray:
        (ndim,) = self.unpack("<B")
        dims = self.unpack(f"<{ndim}I")
        count = int(np.prod(dims)) if dims else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(F32).reshape(dims)


def _header(cur: _Cursor, magic: bytes) -> None:
    if cur.take(4) != magic:
        raise CorruptFile(f"bad magic, expected {magic!r}")
    (version,) = cur.unpack("<I")
    if version != VERSION:
        raise FormatVersionUnknown(f"{magic.decode()} version {version} is not supported")


# -- frozen graph ---------------------------------------------------------------

def graph_to_bytes(graph: Graph, checkpoint: Mapping[str, np.ndarray] | None = None) -> bytes:
    """Serialize ``graph``; with ``checkpoint`` the variable values are folded in."""
    out = [GRAPH_MAGIC, struct.pack("<IQI", VERSION, graph.seed, len(graph.nodes))]
    for node in graph.nodes.values():
        attrs = dict(node.attrs)
        if checkpoint is not None and node.op == "variable" and node.name in checkpoint:
            attrs["value"] = np.asarray(checkpoint[node.name], dtype=F32)
        tensors = {k: v for k, v in attrs.items() if isinstance(v, np.ndarray)}
        plain = {k: v for k, v in attrs.items() if k not in tensors}
        blob = json.dumps(plain, sort_keys=True).encode()
        out.append(_str16(node.name) + struct.pack("<BH", OP_KINDS.index(node.op), len(node.inputs)))
        out.extend(_str16(r) for r in node.inputs)
        out.append(struct.pack("<I", len(blob)) + blob + struct.pack("<H", len(tensors)))
        for k in sorted(tensors):
            out.append(_str16(k) + _tensor(tensors[k]))
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def graph_from_bytes(data: bytes) -> Graph:
    cur = _Cursor(data)
    _header(cur, GRAPH_MAGIC)
    if len(data) < 12 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CorruptFile("checksum mismatch")
    cur.data = data[:-4]
    seed, count = cur.unpack("<QI")
    g = Graph(seed=seed)
    for _ in range(count):
        name = cur.str16()
        op_idx, n_in = cur.unpack("<BH")
        if op_idx >= len(OP_KINDS):
            raise CorruptFile(f"unknown op index {op_idx}")
        inputs = tuple(cur.str16() for _ in range(n_in))
        (n,) = cur.unpack("<I")
        try:
            attrs = json.loads(cur.take(n))
        except ValueError:
            raise CorruptFile("bad attribute block") from None
        (nt,) = cur.unpack("<H")
        for _ in range(nt):
            k = cur.str16()
            attrs[k] = cur.tensor()
        if name in g.nodes:
            raise CorruptFile(f"duplicate node {name!r}")
        g.nodes[name] = Node(name, OP_KINDS[op_idx], inputs, attrs)
    if cur.pos != len(cur.data):
        raise CorruptFile("trailing bytes after node table")
    return g.finalize()


def export_frozen(graph: Graph, path: str, checkpoint: Mapping[str, np.ndarray] | None = None,
                  fs: BlobFS | None = None) -> None:
    (fs or LocalFS()).write_file(str(path), graph_to_bytes(graph, checkpoint))


def import_frozen(path: str, fs: BlobFS | None = None) -> Graph:
    return graph_from_bytes((fs or LocalFS()).read_file(str(path)))


# -- checkpoints ----------------------------------------------------------------

def checkpoint_to_bytes(values: Mapping[str, np.ndarray]) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<II", VERSION, len(values))]
    for name in sorted(values):
        out.append(_str16(name) + _tensor(values[name]))
    return b"".join(out)


def checkpoint_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    cur = _Cursor(data)
    _header(cur, CKPT_MAGIC)
    (count,) = cur.unpack("<I")
    out = {}
    for _ in range(count):
        name = cur.str16()
        out[name] = cur.tensor()
    if cur.pos != len(data):
        raise CorruptFile("trailing bytes after checkpoint entries")
    return out


def save_checkpoint(values: Mapping[str, np.ndarray], path: str, fs: BlobFS | None = None) -> None:
    (fs or LocalFS()).write_file(str(path), checkpoint_to_bytes(values))


def load_checkpoint(path: str, fs: BlobFS | None = None) -> dict[str, np.ndarray]:
    return checkpoint_from_bytes((fs or LocalFS()).read_file(str(path)))
