"""Transparent file protection with chunked authenticated encryption.

On-disk container (little-endian)::

    header   magic "TSFS" | version u32 | chunk_size u32 | chunk_count u32
             | file_length u64 | mode u8 | file_id 16B | header_mac 32B
    chunk i  nonce 12B (index u32 | version u64) | body | tag 16B

``version`` 1 means AES-256-GCM for chunks and HMAC-SHA256 over the header.
Each file derives its own chunk and header keys from the provisioned shield
key and its random ``file_id``, so a nonce never repeats for a (key, chunk)
pair.  AuthOnly files store the body in plaintext; the tag is a GMAC over it.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Protocol

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import HeaderCorrupt, KeyMissing, ShieldRunError, TamperDetected
from .syscalls import O_RDWR, O_READ, O_WRITE

MAGIC = b"TSFS"
VERSION = 1
DEFAULT_CHUNK_SIZE = 65536
NONCE_SIZE = 12
TAG_SIZE = 16
KEY_SIZE = 32
FILE_ID_SIZE = 16
MAC_SIZE = 32

_HEADER = struct.Struct("<4sIIIQB")
HEADER_SIZE = _HEADER.size + FILE_ID_SIZE + MAC_SIZE
_META_ENTRY = NONCE_SIZE + TAG_SIZE + 8


class ShieldMode(str, enum.Enum):
    ENCRYPT_AUTH = "EncryptAuth"
    AUTH_ONLY = "AuthOnly"
    PASSTHROUGH = "Passthrough"


_MODE_BYTE = {ShieldMode.ENCRYPT_AUTH: 1, ShieldMode.AUTH_ONLY: 2}
_BYTE_MODE = {v: k for k, v in _MODE_BYTE.items()}


@dataclass(frozen=True)
class PathPolicy:
    prefix: str
    mode: ShieldMode

    def matches(self, path: str) -> bool:
        p = self.prefix.rstrip("/")
        return path == p or path.startswith(p + "/") or p == ""


def policy_for(path: str, policies: Iterable[PathPolicy]) -> ShieldMode:
    """Longest matching prefix wins; unmatched paths pass through."""
    best: PathPolicy | None = None
    for pol in policies:
        if pol.matches(path) and (best is None or len(pol.prefix.rstrip("/")) > len(best.prefix.rstrip("/"))):
            best = pol
    return best.mode if best else ShieldMode.PASSTHROUGH


def parse_policy_file(text: str) -> list[PathPolicy]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            prefix, mode = line.rstrip("\n").split("\t")
            out.append(PathPolicy(prefix, ShieldMode(mode.strip())))
        except ValueError as exc:
            raise ShieldRunError(f"policy line {n}: expected 'prefix<TAB>mode'") from exc
    return out


def format_policy_file(policies: Iterable[PathPolicy]) -> str:
    return "".join(f"{p.prefix}\t{p.mode.value}\n" for p in policies)


class FileIO(Protocol):
    def open(self, path: str, flags: int = ...) -> int: ...
    def pread(self, fd: int, offset: int, n: int) -> bytes: ...
    def pwrite(self, fd: int, offset: int, data: bytes) -> None: ...
    def close(self, fd: int) -> None: ...
    def rename(self, src: str, dst: str) -> None: ...
    def exists(self, path: str) -> bool: ...
    def size(self, path: str) -> int: ...


@dataclass
class ChunkMeta:
    nonce: bytes
    tag: bytes
    version: int


def _hkdf(key: bytes, salt: bytes, info: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=salt, info=info).derive(key)


def chunk_nonce(index: int, version: int) -> bytes:
    return struct.pack("<IQ", index, version)


@dataclass
class ProtectedFile:
    path: str
    mode: ShieldMode
    chunk_size: int
    fd: int | None = None
    file_id: bytes = b""
    file_length: int = 0
    disk_length: int = 0
    # chunk index -> metadata; lives in enclave memory only
    table: dict[int, ChunkMeta] = field(default_factory=dict)
    dirty: dict[int, bytearray] = field(default_factory=dict)
    chunk_key: bytes = b""
    mac_key: bytes = b""
    table_addr: int | None = None
    table_slots: int = 0

    @property
    def chunk_count(self) -> int:
        return -(-self.file_length // self.chunk_size)

    @property
    def disk_count(self) -> int:
        return -(-self.disk_length // self.chunk_size)

    def chunk_len(self, i: int, length: int | None = None) -> int:
        length = self.file_length if length is None else length
        return max(0, min(self.chunk_size, length - i * self.chunk_size))

    def record_size(self, body: int) -> int:
        return NONCE_SIZE + body + TAG_SIZE

    def record_offset(self, i: int) -> int:
        return HEADER_SIZE + i * self.record_size(self.chunk_size)

    def static_digest(self) -> bytes:
        return hashlib.sha256(
            MAGIC + struct.pack("<IIB", VERSION, self.chunk_size, _MODE_BYTE[self.mode]) + self.file_id
        ).digest()

    def aad(self, i: int) -> bytes:
        return self.static_digest() + struct.pack("<I", i)

    def header_bytes(self) -> bytes:
        body = _HEADER.pack(MAGIC, VERSION, self.chunk_size, self.chunk_count, self.file_length,
                            _MODE_BYTE[self.mode]) + self.file_id
        return body + hmac.new(self.mac_key, body, hashlib.sha256).digest()


class FileShield:
    """Per-path protection of file I/O issued from inside the enclave.

    ``runtime`` (optional) receives cost hooks: ``charge_crypto(nbytes)``,
    ``alloc(nbytes)`` and ``mem_access(addr, nbytes, kind)``.
    """

    def __init__(self, io: FileIO, policies: Iterable[PathPolicy] = (), key: bytes | None = None,
                 chunk_size: int = DEFAULT_CHUNK_SIZE, runtime=None) -> None:
        if chunk_size <= 0 or chunk_size > (1 << 24):
            raise ShieldRunError("chunk_size out of range")
        self.io = io
        self.policies = list(policies)
        self.key = key
        self.chunk_size = chunk_size
        self.runtime = runtime
        self.files: dict[str, ProtectedFile] = {}
        self.bytes_sealed = 0
        self.bytes_unsealed = 0
        self._buffer_addr: int | None = None

    def set_key(self, key: bytes) -> None:
        if len(key) != KEY_SIZE:
            raise ShieldRunError("shield key must be 32 bytes")
        self.key = bytes(key)

    def policy_for(self, path: str) -> ShieldMode:
        return policy_for(path, self.policies)

    # -- cost hooks --------------------------------------------------------

    def _crypto(self, f: ProtectedFile, nbytes: int) -> None:
        rt = self.runtime
        if rt is None:
            return
        rt.charge_crypto(nbytes)
        if self._buffer_addr is None:
            self._buffer_addr = rt.alloc(self.chunk_size)
        rt.mem_access(self._buffer_addr, min(nbytes, self.chunk_size) or 1, "write")

    def _touch_meta(self, f: ProtectedFile, i: int, kind: str = "read") -> None:
        rt = self.runtime
        if rt is None:
            return
        if f.table_addr is None or i >= f.table_slots:
            f.table_slots = max(64, 2 * (i + 1))
            f.table_addr = rt.alloc(f.table_slots * _META_ENTRY)
        rt.mem_access(f.table_addr + i * _META_ENTRY, _META_ENTRY, kind)

    # -- open / close ------------------------------------------------------

    def open(self, path: str, create: bool = True, truncate: bool = False) -> ProtectedFile:
        if path in self.files and not truncate:
            return self.files[path]
        if path in self.files:
            self.close(path, flush=False)
        mode = self.policy_for(path)
        f = ProtectedFile(path, mode, self.chunk_size)
        exists = self.io.exists(path)
        if mode is ShieldMode.PASSTHROUGH:
            if not exists and not create:
                raise FileNotFoundError(path)
            if truncate or not exists:
                self.io.close(self.io.open(path, O_WRITE))
            f.fd = self.io.open(path, O_READ)
            f.file_length = f.disk_length = self.io.size(path)
            self.files[path] = f
            return f
        if self.key is None:
            raise KeyMissing(f"no shield key provisioned for {path}")
        if exists and not truncate:
            f.fd = self.io.open(path, O_READ)
            self._load_header(f)
        elif not create:
            raise FileNotFoundError(path)
        else:
            f.file_id = os.urandom(FILE_ID_SIZE)
            self._derive(f)
        self.files[path] = f
        return f

    def _derive(self, f: ProtectedFile) -> None:
        f.chunk_key = _hkdf(self.key, f.file_id, b"tsfs chunk key")
        f.mac_key = _hkdf(self.key, f.file_id, b"tsfs header key")

    def _load_header(self, f: ProtectedFile) -> None:
        raw = self.io.pread(f.fd, 0, HEADER_SIZE)
        if len(raw) != HEADER_SIZE:
            raise HeaderCorrupt(f"{f.path}: short header")
        magic, version, chunk_size, count, length, mode_b = _HEADER.unpack_from(raw)
        if magic != MAGIC or version != VERSION:
            raise HeaderCorrupt(f"{f.path}: not a TSFS v{VERSION} container")
        if _BYTE_MODE.get(mode_b) is not f.mode:
            raise HeaderCorrupt(f"{f.path}: container mode does not match policy")
        if chunk_size <= 0 or count != -(-length // chunk_size):
            raise HeaderCorrupt(f"{f.path}: inconsistent header")
        f.file_id = raw[_HEADER.size:_HEADER.size + FILE_ID_SIZE]
        self._derive(f)
        body = raw[:_HEADER.size + FILE_ID_SIZE]
        mac = raw[_HEADER.size + FILE_ID_SIZE:]
        if not hmac.compare_digest(mac, hmac.new(f.mac_key, body, hashlib.sha256).digest()):
            raise HeaderCorrupt(f"{f.path}: header authentication failed")
        f.chunk_size = chunk_size
        f.file_length = f.disk_length = length

    def close(self, path: str, flush: bool = True) -> None:
        f = self.files.get(path)
        if f is None:
            return
        if flush:
            self.flush(path)
        if f.fd is not None:
            self.io.close(f.fd)
        del self.files[path]

    def close_all(self) -> None:
        for path in list(self.files):
            self.close(path)

    # -- chunk codec -------------------------------------------------------

    def _seal(self, f: ProtectedFile, i: int, body: bytes, version: int) -> tuple[bytes, ChunkMeta]:
        nonce = chunk_nonce(i, version)
        gcm = AESGCM(f.chunk_key)
        if f.mode is ShieldMode.ENCRYPT_AUTH:
            ct = gcm.encrypt(nonce, body, f.aad(i))
            out, tag = ct[:-TAG_SIZE], ct[-TAG_SIZE:]
        else:
            tag = gcm.encrypt(nonce, b"", f.aad(i) + body)
            out = body
        self.bytes_sealed += len(body)
        self._crypto(f, len(body))
        return nonce + out + tag, ChunkMeta(nonce, tag, version)

    def _read_record(self, f: ProtectedFile, i: int) -> bytes:
        body = f.chunk_len(i, f.disk_length)
        rec = self.io.pread(f.fd, f.record_offset(i), f.record_size(body))
        if len(rec) != f.record_size(body):
            raise TamperDetected(f"{f.path}: chunk {i} truncated")
        return rec

    def _unseal(self, f: ProtectedFile, i: int, rec: bytes) -> bytes:
        nonce, body, tag = rec[:NONCE_SIZE], rec[NONCE_SIZE:-TAG_SIZE], rec[-TAG_SIZE:]
        idx, version = struct.unpack("<IQ", nonce)
        if idx != i:
            raise TamperDetected(f"{f.path}: chunk {i} carries nonce for chunk {idx}")
        known = f.table.get(i)
        self._touch_meta(f, i)
        if known is not None and (known.nonce != nonce or known.tag != tag):
            raise TamperDetected(f"{f.path}: chunk {i} differs from in-enclave metadata")
        gcm = AESGCM(f.chunk_key)
        try:
            if f.mode is ShieldMode.ENCRYPT_AUTH:
                plain = gcm.decrypt(nonce, body + tag, f.aad(i))
            else:
                gcm.decrypt(nonce, tag, f.aad(i) + body)
                plain = body
        except InvalidTag:
            raise TamperDetected(f"{f.path}: chunk {i} failed authentication") from None
        if known is None:
            f.table[i] = ChunkMeta(nonce, tag, version)
            self._touch_meta(f, i, "write")
        self.bytes_unsealed += len(plain)
        self._crypto(f, len(plain))
        return plain

    def _plain_chunk(self, f: ProtectedFile, i: int) -> bytes:
        if i in f.dirty:
            buf = f.dirty[i]
        elif i < f.disk_count:
            buf = self._unseal(f, i, self._read_record(f, i))
        else:
            buf = b""
        want = f.chunk_len(i)
        if len(buf) < want:
            buf = bytes(buf) + bytes(want - len(buf))
        return bytes(buf[:want])

    def _dirty_chunk(self, f: ProtectedFile, i: int) -> bytearray:
        buf = f.dirty.get(i)
        if buf is None:
            buf = bytearray(self._unseal(f, i, self._read_record(f, i))) if i < f.disk_count else bytearray()
            f.dirty[i] = buf
        return buf

    # -- data path ---------------------------------------------------------

    def _handle(self, path: str) -> ProtectedFile:
        f = self.files.get(path)
        return f if f is not None else self.open(path)

    def read(self, path: str, offset: int, n: int) -> bytes:
        f = self._handle(path)
        if offset < 0 or n < 0:
            raise ValueError("negative offset or length")
        end = min(offset + n, f.file_length)
        if offset >= end:
            return b""
        if f.mode is ShieldMode.PASSTHROUGH:
            return self.io.pread(f.fd, offset, end - offset)
        cs = f.chunk_size
        parts = []
        for i in range(offset // cs, (end - 1) // cs + 1):
            plain = self._plain_chunk(f, i)
            lo = max(offset, i * cs) - i * cs
            hi = min(end, (i + 1) * cs) - i * cs
            parts.append(plain[lo:hi])
        # nothing is returned unless every chunk verified
        return b"".join(parts)

    def write(self, path: str, offset: int, data: bytes) -> None:
        f = self._handle(path)
        if offset < 0:
            raise ValueError("negative offset")
        if not data:
            return
        if f.mode is ShieldMode.PASSTHROUGH:
            fd = self.io.open(path, O_RDWR)
            try:
                self.io.pwrite(fd, offset, bytes(data))
            finally:
                self.io.close(fd)
            f.file_length = f.disk_length = max(f.file_length, offset + len(data))
            return
        cs = f.chunk_size
        end = offset + len(data)
        old_len, old_count = f.file_length, f.chunk_count
        if end > old_len:
            if old_len % cs:
                # old tail chunk gets zero-extended, so it is rewritten
                self._dirty_chunk(f, old_count - 1)
            for i in range(old_count, -(-end // cs)):
                f.dirty.setdefault(i, bytearray())
            f.file_length = end
        mv = memoryview(bytes(data))
        for i in range(offset // cs, (end - 1) // cs + 1):
            buf = self._dirty_chunk(f, i)
            lo = max(offset, i * cs) - i * cs
            hi = min(end, (i + 1) * cs) - i * cs
            if len(buf) < hi:
                buf.extend(bytes(hi - len(buf)))
            src = i * cs + lo - offset
            buf[lo:hi] = mv[src:src + hi - lo]

    def flush(self, path: str) -> None:
        """Persist header and dirty chunks via write-temp-then-rename."""
        f = self.files.get(path)
        if f is None or f.mode is ShieldMode.PASSTHROUGH:
            return
        if not f.dirty and f.disk_length == f.file_length and f.fd is not None:
            return
        records = []
        new_table: dict[int, ChunkMeta] = {}
        for i in range(f.chunk_count):
            if i in f.dirty:
                body = bytes(f.dirty[i][:f.chunk_len(i)])
                body += bytes(f.chunk_len(i) - len(body))
                prev = f.table.get(i)
                rec, meta = self._seal(f, i, body, prev.version + 1 if prev else 1)
                new_table[i] = meta
                self._touch_meta(f, i, "write")
            else:
                rec = self._read_record(f, i)
                if i in f.table:
                    new_table[i] = f.table[i]
            records.append(rec)
        tmp = f"{path}.tsfs-tmp"
        fd = self.io.open(tmp, O_WRITE)
        try:
            self.io.pwrite(fd, 0, f.header_bytes() + b"".join(records))
        finally:
            self.io.close(fd)
        self.io.rename(tmp, path)
        if f.fd is not None:
            self.io.close(f.fd)
        f.fd = self.io.open(path, O_READ)
        f.table = new_table
        f.dirty.clear()
        f.disk_length = f.file_length

    # -- conveniences ------------------------------------------------------

    def size(self, path: str) -> int:
        return self._handle(path).file_length

    def read_file(self, path: str) -> bytes:
        f = self.open(path, create=False)
        return self.read(path, 0, f.file_length)

    def write_file(self, path: str, data: bytes) -> None:
        self.open(path, truncate=True)
        self.write(path, 0, data)
        self.flush(path)

