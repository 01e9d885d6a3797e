"""Configuration-and-secrets service (CAS): attest, then release secrets.

Wire protocol inside an established secure channel; each channel message
is ``length u32 BE | type u8 | body`` where length covers type and body::

    server -> client  QUOTE_REQ  nonce 16
    client -> server  QUOTE      quote bytes
    server -> client  RELEASE    JSON secrets bundle
                   or DENY       UTF-8 reason
"""

from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .errors import (
    AttestationDenied,
    ChannelError,
    NonceReused,
    ProvisioningFailed,
    SignatureInvalid,
    UnknownMeasurement,
)
from .fsshield import FileShield, PathPolicy, ShieldMode, format_policy_file, parse_policy_file
from .netshield import SecureChannel, SocketTransport, client_handshake, identity_public, server_handshake, PeerPolicy
from .quote import NONCE_SIZE, AttestationQuote, verify_quote
from .syscalls import DirectIO

log = logging.getLogger(__name__)

QUOTE_REQ, QUOTE, RELEASE, DENY = 1, 2, 3, 4
_MAX_MESSAGE = 1 << 20


def encode_message(kind: int, body: bytes) -> bytes:
    return struct.pack(">IB", len(body) + 1, kind) + body


def decode_message(raw: bytes) -> tuple[int, bytes]:
    if len(raw) < 5:
        raise ValueError("short CAS message")
    n, kind = struct.unpack(">IB", raw[:5])
    if n != len(raw) - 4 or n > _MAX_MESSAGE:
        raise ValueError("CAS message length mismatch")
    if kind not in (QUOTE_REQ, QUOTE, RELEASE, DENY):
        raise ValueError(f"unknown CAS message type {kind}")
    return kind, raw[5:]


def _raw_private(key: Ed25519PrivateKey) -> bytes:
    return key.private_bytes(serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
                             serialization.NoEncryption())


@dataclass(frozen=True)
class SecretsBundle:
    fs_key: bytes
    identity: bytes  # raw Ed25519 private key for the enclave's channel identity
    policy: str = ""

    def identity_key(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.identity)

    def policies(self) -> list[PathPolicy]:
        return parse_policy_file(self.policy)

    def to_json(self) -> dict:
        return {"fs_key": self.fs_key.hex(), "identity": self.identity.hex(), "policy": self.policy}

    @classmethod
    def from_json(cls, d: dict) -> SecretsBundle:
        return cls(bytes.fromhex(d["fs_key"]), bytes.fromhex(d["identity"]), d.get("policy", ""))

    @classmethod
    def generate(cls, policies: list[PathPolicy] | None = None) -> SecretsBundle:
        return cls(os.urandom(32), _raw_private(Ed25519PrivateKey.generate()),
                   format_policy_file(policies or []))


class SecretsRegistry:
    """measurement digest -> bundle, persisted as a TSFS EncryptAuth record file."""

    def __init__(self, entries: dict[bytes, SecretsBundle] | None = None) -> None:
        self.entries = dict(entries or {})

    def register(self, measurement, bundle: SecretsBundle) -> None:
        self.entries[bytes(getattr(measurement, "digest", measurement))] = bundle

    def lookup(self, digest: bytes) -> SecretsBundle | None:
        return self.entries.get(bytes(digest))

    def _shield(self, key: bytes) -> FileShield:
        return FileShield(DirectIO(), [PathPolicy("", ShieldMode.ENCRYPT_AUTH)], key=key)

    def save(self, path: str | Path, key: bytes) -> None:
        doc = {d.hex(): b.to_json() for d, b in sorted(self.entries.items())}
        fs = self._shield(key)
        fs.write_file(str(path), json.dumps(doc, sort_keys=True).encode())
        fs.close_all()

    @classmethod
    def load(cls, path: str | Path, key: bytes) -> SecretsRegistry:
        fs = cls()._shield(key)
        try:
            doc = json.loads(fs.read_file(str(path)))
        finally:
            fs.close_all()
        return cls({bytes.fromhex(d): SecretsBundle.from_json(b) for d, b in doc.items()})


class CasService:
    """Quote verification and release decisions.  Thread-safe."""

    def __init__(self, registry: SecretsRegistry, platform_key: bytes) -> None:
        self.registry = registry
        self.platform_key = platform_key
        self._issued: set[bytes] = set()
        self._used: set[bytes] = set()
        # registry and nonce ledger have a single owner; the lock serializes access
        self._lock = threading.Lock()

    def issue_nonce(self) -> bytes:
        nonce = os.urandom(NONCE_SIZE)
        with self._lock:
            self._issued.add(nonce)
        return nonce

    def verify_and_release(self, quote: AttestationQuote, expected_nonce: bytes | None = None) -> SecretsBundle:
        if not verify_quote(quote, self.platform_key):
            raise SignatureInvalid("quote signature does not verify under the platform key")
        with self._lock:
            if (quote.nonce in self._used or quote.nonce not in self._issued
                    or (expected_nonce is not None and quote.nonce != expected_nonce)):
                raise NonceReused("quote nonce is stale, reused or was never issued")
            self._issued.discard(quote.nonce)
            self._used.add(quote.nonce)
            bundle = self.registry.lookup(quote.measurement)
        if bundle is None:
            raise UnknownMeasurement(f"measurement {quote.measurement.hex()} is not registered")
        return bundle

    def handle(self, channel: SecureChannel) -> None:
        """Run one attestation exchange on an established channel."""
        nonce = self.issue_nonce()
        channel.send(encode_message(QUOTE_REQ, nonce))
        try:
            kind, body = decode_message(channel.recv())
            if kind != QUOTE:
                raise ValueError("expected QUOTE")
            quote = AttestationQuote.from_bytes(body)
            bundle = self.verify_and_release(quote, expected_nonce=nonce)
        except AttestationDenied as exc:
            log.info("release denied: %s", exc)
            channel.send(encode_message(DENY, exc.reason.encode()))
            return
        except ValueError as exc:
            channel.send(encode_message(DENY, b"malformed"))
            log.info("malformed CAS request: %s", exc)
            return
        channel.send(encode_message(RELEASE, json.dumps(bundle.to_json()).encode()))


class CasServer:
    """TCP front end: net-shield handshake, then :meth:`CasService.handle`."""

    def __init__(self, service: CasService, identity: Ed25519PrivateKey,
                 address: tuple[str, int] = ("127.0.0.1", 0)) -> None:
        self.service = service
        self.identity = identity
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                transport = SocketTransport(self.request)
                try:
                    ch = server_handshake(transport, outer.identity)
                    outer.service.handle(ch)
                    ch.close()
                except ChannelError as exc:
                    log.info("CAS connection dropped: %s", exc)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server(address, Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def public_key(self) -> bytes:
        return identity_public(self.identity)

    def start(self) -> CasServer:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


def serve(bind: tuple[str, int], registry: SecretsRegistry, platform_key: bytes,
          identity: Ed25519PrivateKey) -> CasServer:
    return CasServer(CasService(registry, platform_key), identity, bind).start()


def provision(enclave, address: tuple[str, int], cas_identity: bytes | None = None,
              timeout: float = 10.0) -> SecretsBundle:
    """Attest ``enclave`` to the CAS at ``address`` and install the released secrets."""
    if enclave.provisioned:
        raise ProvisioningFailed("enclave already provisioned")
    try:
        sock = socket.create_connection(address, timeout=timeout)
    except OSError as exc:
        raise ProvisioningFailed(f"cannot reach CAS at {address}: {exc}") from exc
    # the channel identity is ephemeral until the CAS hands out the real one
    transport = SocketTransport(sock)
    try:
        ch = client_handshake(transport, Ed25519PrivateKey.generate(),
                              peer=PeerPolicy(pinned_identity=cas_identity))
        kind, nonce = decode_message(ch.recv())
        if kind != QUOTE_REQ or len(nonce) != NONCE_SIZE:
            raise ProvisioningFailed("CAS did not send a quote challenge")
        ch.send(encode_message(QUOTE, enclave.quote(nonce).to_bytes()))
        kind, body = decode_message(ch.recv())
        ch.close()
    except (ChannelError, ValueError, OSError) as exc:
        transport.close()
        raise ProvisioningFailed(f"provisioning exchange failed: {exc}") from exc
    if kind == DENY:
        raise ProvisioningFailed(f"CAS denied release: {body.decode(errors='replace')}")
    if kind != RELEASE:
        raise ProvisioningFailed("unexpected CAS reply")
    bundle = SecretsBundle.from_json(json.loads(body))
    policies = tuple(bundle.policies()) or None
    enclave.provision(bundle.fs_key, bundle.identity_key(), policies)
    return bundle
