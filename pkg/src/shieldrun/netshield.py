"""Minimal TLS-like channel: signed ephemeral X25519 + AES-GCM records.

Handshake frames are ``type u8 | length u32 BE | body``::

    CLIENT_HELLO  version u8 | random 32 | eph_pub 32 | want_quote u8 | quote_nonce 16
    SERVER_HELLO  random 32 | eph_pub 32 | id_pub 32 | want_quote u8 | quote_nonce 16
                  | quote_len u16 | quote | sig 64
    CLIENT_FINISH id_pub 32 | quote_len u16 | quote | sig 64

Signatures are Ed25519 over SHA-256 of the transcript so far.  A quote is
produced over ``bind_nonce(verifier_nonce, eph_pub, id_pub)`` so it cannot be
lifted into another handshake.

Records are ``seq u64 BE | length u32 BE | AES-GCM(ciphertext || tag)`` with
nonce ``0^4 || seq`` and the 12-byte record header as associated data.  The
first plaintext byte is a fragment flag (0 last, 1 more, 2 close).
"""

from __future__ import annotations

import hashlib
import os
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Protocol

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    AuthFailure,
    ChannelClosed,
    ChannelError,
    Downgrade,
    IntegrityFailure,
    MeasurementMismatch,
    ReplayDetected,
)
from .quote import AttestationQuote, verify_quote

PROTOCOL_VERSION = 1
CLIENT_HELLO, SERVER_HELLO, CLIENT_FINISH = 1, 2, 3
MAX_RECORD = 16384  # bytes of ciphertext + tag per record
TAG = 16
RECORD_HEADER = struct.Struct(">QI")
MAX_FRAGMENT = MAX_RECORD - TAG - 1
FLAG_LAST, FLAG_MORE, FLAG_CLOSE = 0, 1, 2
_MAX_HANDSHAKE = 4096


class Transport(Protocol):
    def send_bytes(self, data: bytes) -> None: ...
    def recv_exact(self, n: int) -> bytes: ...
    def close(self) -> None: ...


class _PipeEnd:
    def __init__(self, inbox: bytearray, outbox: bytearray, cond: threading.Condition,
                 state: dict) -> None:
        self._in, self._out, self._cond, self._state = inbox, outbox, cond, state
        self.sent: list[bytes] = []  # every send_bytes call, for adversarial tests

    def send_bytes(self, data: bytes) -> None:
        with self._cond:
            if self._state["closed"]:
                raise ChannelClosed("pipe closed")
            self._out += data
            self.sent.append(bytes(data))
            self._cond.notify_all()

    def recv_exact(self, n: int) -> bytes:
        with self._cond:
            ok = self._cond.wait_for(lambda: len(self._in) >= n or self._state["closed"], timeout=30)
            if len(self._in) < n:
                raise ChannelClosed("pipe closed" if ok else "pipe read timed out")
            out = bytes(self._in[:n])
            del self._in[:n]
            return out

    def inject(self, data: bytes) -> None:
        """Place raw bytes in this end's inbox (adversary helper)."""
        with self._cond:
            self._in += data
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._state["closed"] = True
            self._cond.notify_all()


def memory_pipe() -> tuple[_PipeEnd, _PipeEnd]:
    """Two connected in-memory stream ends."""
    a_to_b, b_to_a = bytearray(), bytearray()
    cond = threading.Condition()
    state = {"closed": False}
    return _PipeEnd(b_to_a, a_to_b, cond, state), _PipeEnd(a_to_b, b_to_a, cond, state)


class SocketTransport:
    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock

    def send_bytes(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc

    def recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                part = self.sock.recv(n - len(buf))
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc
            if not part:
                raise ChannelClosed("peer closed connection")
            buf += part
        return bytes(buf)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


# -- handshake helpers -------------------------------------------------------

def _raw_pub(key) -> bytes:
    return key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def identity_public(identity: Ed25519PrivateKey) -> bytes:
    return _raw_pub(identity)


def bind_nonce(verifier_nonce: bytes, eph_pub: bytes, id_pub: bytes) -> bytes:
    return hashlib.sha256(b"shieldrun quote binding" + verifier_nonce + eph_pub + id_pub).digest()[:16]


def _frame(kind: int, body: bytes) -> bytes:
    return struct.pack(">BI", kind, len(body)) + body


def _read_frame(t: Transport, kind: int) -> tuple[bytes, bytes]:
    head = t.recv_exact(5)
    got, n = struct.unpack(">BI", head)
    if got != kind or n > _MAX_HANDSHAKE:
        raise AuthFailure(f"unexpected handshake message type {got}")
    body = t.recv_exact(n)
    return head + body, body


class _Reader:
    def __init__(self, body: bytes) -> None:
        self.body, self.pos = body, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            raise AuthFailure("truncated handshake message")
        out = self.body[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def done(self) -> None:
        if self.pos != len(self.body):
            raise AuthFailure("trailing bytes in handshake message")


def _sign(identity: Ed25519PrivateKey, label: bytes, transcript: bytes) -> bytes:
    return identity.sign(label + hashlib.sha256(transcript).digest())


def _verify(pub: bytes, sig: bytes, label: bytes, transcript: bytes) -> None:
    try:
        Ed25519PublicKey.from_public_bytes(pub).verify(sig, label + hashlib.sha256(transcript).digest())
    except (InvalidSignature, ValueError):
        raise AuthFailure("handshake signature check failed") from None


def _derive(shared: bytes, transcript: bytes) -> tuple[bytes, bytes]:
    salt = hashlib.sha256(transcript).digest()

    def k(info: bytes) -> bytes:
        return HKDF(algorithm=hashes.SHA256(), length=32, salt=salt, info=info).derive(shared)

    return k(b"shieldrun c2s"), k(b"shieldrun s2c")


@dataclass
class PeerPolicy:
    """What one side demands of the other during the handshake."""

    platform_key: bytes | None = None  # platform verification key for quotes
    expected_peer: bytes | None = None  # measurement digest the peer must have
    require_quote: bool = False
    pinned_identity: bytes | None = None  # peer identity public key

    @property
    def wants_quote(self) -> bool:
        return self.require_quote or self.expected_peer is not None


def _check_peer_quote(policy: PeerPolicy, quote_bytes: bytes, nonce: bytes,
                      eph_pub: bytes, id_pub: bytes) -> bytes | None:
    if policy.pinned_identity is not None and policy.pinned_identity != id_pub:
        raise AuthFailure("peer identity key does not match pinned key")
    if not quote_bytes:
        if policy.wants_quote:
            raise Downgrade("peer sent no attestation quote")
        return None
    try:
        quote = AttestationQuote.from_bytes(quote_bytes)
    except ValueError:
        raise AuthFailure("malformed quote") from None
    if policy.platform_key is None:
        if policy.wants_quote:
            raise AuthFailure("no platform key to verify peer quote")
        return None
    if not verify_quote(quote, policy.platform_key, bind_nonce(nonce, eph_pub, id_pub)):
        raise AuthFailure("peer quote does not verify")
    if policy.expected_peer is not None and quote.measurement != policy.expected_peer:
        raise MeasurementMismatch(
            f"peer measurement {quote.measurement.hex()} != expected {policy.expected_peer.hex()}")
    return quote.measurement


Quoter = Callable[[bytes], "object"]


def _make_quote(quoter: Quoter | None, wanted: bool, nonce: bytes, eph_pub: bytes, id_pub: bytes) -> bytes:
    if not wanted or quoter is None:
        return b""
    return quoter(bind_nonce(nonce, eph_pub, id_pub)).to_bytes()


def client_handshake(t: Transport, identity: Ed25519PrivateKey, *, quoter: Quoter | None = None,
                     peer: PeerPolicy | None = None) -> SecureChannel:
    peer = peer or PeerPolicy()
    try:
        eph = X25519PrivateKey.generate()
        eph_pub = _raw_pub(eph)
        my_nonce = os.urandom(16)
        ch = _frame(CLIENT_HELLO, bytes([PROTOCOL_VERSION]) + os.urandom(32) + eph_pub
                    + bytes([peer.wants_quote]) + my_nonce)
        t.send_bytes(ch)
        sh_frame, body = _read_frame(t, SERVER_HELLO)
        r = _Reader(body)
        r.take(32)
        s_eph, s_id, s_wants, s_nonce = r.take(32), r.take(32), r.u8(), r.take(16)
        s_quote = r.take(r.u16())
        sig = r.take(64)
        r.done()
        _verify(s_id, sig, b"shieldrun server", ch + sh_frame[:-64])
        measurement = _check_peer_quote(peer, s_quote, my_nonce, s_eph, s_id)
        my_id = identity_public(identity)
        cf_body = my_id
        q = _make_quote(quoter, bool(s_wants), s_nonce, eph_pub, my_id)
        cf_body += struct.pack(">H", len(q)) + q
        unsigned = _frame(CLIENT_FINISH, cf_body + bytes(64))[:-64]
        cf = unsigned + _sign(identity, b"shieldrun client", ch + sh_frame + unsigned)
        t.send_bytes(cf)
        try:
            shared = eph.exchange(X25519PublicKey.from_public_bytes(s_eph))
        except ValueError:
            raise AuthFailure("bad peer key share") from None
        c2s, s2c = _derive(shared, ch + sh_frame + cf)
        return SecureChannel("client", t, send_key=c2s, recv_key=s2c, peer_measurement=measurement,
                             peer_identity=s_id)
    except ChannelError:
        t.close()
        raise


def server_handshake(t: Transport, identity: Ed25519PrivateKey, *, quoter: Quoter | None = None,
                     peer: PeerPolicy | None = None) -> SecureChannel:
    peer = peer or PeerPolicy()
    try:
        ch, body = _read_frame(t, CLIENT_HELLO)
        r = _Reader(body)
        if r.u8() != PROTOCOL_VERSION:
            raise AuthFailure("unsupported protocol version")
        r.take(32)
        c_eph, c_wants, c_nonce = r.take(32), r.u8(), r.take(16)
        r.done()
        eph = X25519PrivateKey.generate()
        eph_pub = _raw_pub(eph)
        my_id = identity_public(identity)
        my_nonce = os.urandom(16)
        q = _make_quote(quoter, bool(c_wants), c_nonce, eph_pub, my_id)
        sh_body = (os.urandom(32) + eph_pub + my_id + bytes([peer.wants_quote]) + my_nonce
                   + struct.pack(">H", len(q)) + q)
        unsigned = _frame(SERVER_HELLO, sh_body + bytes(64))[:-64]
        sh = unsigned + _sign(identity, b"shieldrun server", ch + unsigned)
        t.send_bytes(sh)
        cf_frame, body = _read_frame(t, CLIENT_FINISH)
        r = _Reader(body)
        c_id = r.take(32)
        c_quote = r.take(r.u16())
        sig = r.take(64)
        r.done()
        _verify(c_id, sig, b"shieldrun client", ch + sh + cf_frame[:-64])
        measurement = _check_peer_quote(peer, c_quote, my_nonce, c_eph, c_id)
        try:
            shared = eph.exchange(X25519PublicKey.from_public_bytes(c_eph))
        except ValueError:
            raise AuthFailure("bad peer key share") from None
        c2s, s2c = _derive(shared, ch + sh + cf_frame)
        return SecureChannel("server", t, send_key=s2c, recv_key=c2s, peer_measurement=measurement,
                             peer_identity=c_id)
    except ChannelError:
        t.close()
        raise


def handshake(transport: Transport, role: str, identity: Ed25519PrivateKey, *,
              quoter: Quoter | None = None, platform_key: bytes | None = None,
              expected_peer: bytes | None = None, require_quote: bool = False,
              pinned_identity: bytes | None = None) -> SecureChannel:
    peer = PeerPolicy(platform_key, expected_peer, require_quote, pinned_identity)
    if role == "client":
        return client_handshake(transport, identity, quoter=quoter, peer=peer)
    if role == "server":
        return server_handshake(transport, identity, quoter=quoter, peer=peer)
    raise ValueError(f"role must be client or server, not {role!r}")


# -- record layer ------------------------------------------------------------

def record_nonce(seq: int) -> bytes:
    return bytes(4) + struct.pack(">Q", seq)


def seal_record(key: bytes, seq: int, plaintext: bytes) -> bytes:
    n = len(plaintext) + TAG
    if n > MAX_RECORD:
        raise ValueError("record too large")
    head = RECORD_HEADER.pack(seq, n)
    return head + AESGCM(key).encrypt(record_nonce(seq), plaintext, head)


@dataclass
class SecureChannel:
    role: str
    transport: Transport
    send_key: bytes = field(repr=False)
    recv_key: bytes = field(repr=False)
    peer_measurement: bytes | None = None
    peer_identity: bytes | None = None
    send_seq: int = 0
    recv_seq: int = 0
    failed: ChannelError | None = None
    closed: bool = False

    def _check_open(self) -> None:
        if self.failed is not None or self.closed:
            raise ChannelClosed("channel is closed" if self.failed is None
                                else f"channel failed earlier: {self.failed}")

    def _emit(self, flag: int, data: bytes) -> None:
        rec = seal_record(self.send_key, self.send_seq, bytes([flag]) + data)
        self.send_seq += 1
        self.transport.send_bytes(rec)

    def send(self, data: bytes) -> None:
        self._check_open()
        view = memoryview(bytes(data))
        while True:
            part, view = view[:MAX_FRAGMENT], view[MAX_FRAGMENT:]
            self._emit(FLAG_MORE if len(view) else FLAG_LAST, bytes(part))
            if not len(view):
                return

    def _fail(self, err: ChannelError) -> ChannelError:
        self.failed = err
        return err

    def _recv_record(self) -> tuple[int, bytes]:
        head = self.transport.recv_exact(RECORD_HEADER.size)
        seq, n = RECORD_HEADER.unpack(head)
        if n < TAG + 1 or n > MAX_RECORD:
            raise self._fail(IntegrityFailure(f"bad record length {n}"))
        body = self.transport.recv_exact(n)
        if seq < self.recv_seq:
            raise self._fail(ReplayDetected(f"record {seq} already accepted"))
        if seq != self.recv_seq:
            raise self._fail(IntegrityFailure(f"record {seq} out of order, expected {self.recv_seq}"))
        try:
            plain = AESGCM(self.recv_key).decrypt(record_nonce(seq), body, head)
        except InvalidTag:
            raise self._fail(IntegrityFailure(f"record {seq} failed authentication")) from None
        self.recv_seq += 1
        return plain[0], plain[1:]

    def recv(self) -> bytes:
        """Next complete message.  Nothing is returned from a record that failed checks."""
        self._check_open()
        parts = []
        while True:
            try:
                flag, data = self._recv_record()
            except ChannelClosed as exc:
                raise self._fail(exc) from None
            if flag == FLAG_CLOSE:
                self.closed = True
                raise ChannelClosed("peer closed the channel")
            if flag not in (FLAG_LAST, FLAG_MORE):
                raise self._fail(IntegrityFailure("unknown record flag"))
            parts.append(data)
            if flag == FLAG_LAST:
                return b"".join(parts)

    def close(self) -> None:
        if self.failed is None and not self.closed:
            try:
                self._emit(FLAG_CLOSE, b"")
            except ChannelError:
                pass
        self.closed = True
        self.transport.close()


def save_identity(fs, path: str, identity: Ed25519PrivateKey) -> None:
    """Store an identity key through the file shield (protect the path EncryptAuth)."""
    raw = identity.private_bytes(serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
                                 serialization.NoEncryption())
    fs.write_file(path, raw)


def load_identity(fs, path: str) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(fs.read_file(path))
