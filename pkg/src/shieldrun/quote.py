"""Simulated platform quoting: the stand-in for the hardware root of trust."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

NONCE_SIZE = 16
DIGEST_SIZE = 32
SIG_SIZE = 64
_LABEL = b"shieldrun quote v1\0"


@dataclass(frozen=True)
class AttestationQuote:
    measurement: bytes
    nonce: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return _LABEL + self.measurement + self.nonce

    def to_bytes(self) -> bytes:
        return self.measurement + self.nonce + self.signature

    @classmethod
    def from_bytes(cls, raw: bytes) -> AttestationQuote:
        if len(raw) != DIGEST_SIZE + NONCE_SIZE + SIG_SIZE:
            raise ValueError(f"quote must be {DIGEST_SIZE + NONCE_SIZE + SIG_SIZE} bytes")
        return cls(raw[:DIGEST_SIZE], raw[DIGEST_SIZE:DIGEST_SIZE + NONCE_SIZE],
                   raw[DIGEST_SIZE + NONCE_SIZE:])


class Platform:
    """Holds the platform signing key that enclaves on this host quote with."""

    def __init__(self, signing_key: Ed25519PrivateKey | None = None) -> None:
        self.signing_key = signing_key or Ed25519PrivateKey.generate()

    @property
    def verification_key(self) -> bytes:
        return self.signing_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    def quote(self, measurement, nonce: bytes) -> AttestationQuote:
        digest = getattr(measurement, "digest", measurement)
        if len(digest) != DIGEST_SIZE or len(nonce) != NONCE_SIZE:
            raise ValueError("quote needs a 32-byte measurement and a 16-byte nonce")
        unsigned = AttestationQuote(bytes(digest), bytes(nonce), b"")
        return AttestationQuote(unsigned.measurement, unsigned.nonce,
                                self.signing_key.sign(unsigned.signed_bytes()))

    def save(self, path: str | Path) -> None:
        raw = self.signing_key.private_bytes(serialization.Encoding.Raw,
                                             serialization.PrivateFormat.Raw,
                                             serialization.NoEncryption())
        Path(path).write_bytes(raw)

    @classmethod
    def load(cls, path: str | Path) -> Platform:
        return cls(Ed25519PrivateKey.from_private_bytes(Path(path).read_bytes()))


def verify_quote(quote: AttestationQuote, verification_key: bytes, nonce: bytes | None = None) -> bool:
    """Signature check under the platform key, plus nonce equality when given."""
    if nonce is not None and quote.nonce != nonce:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(verification_key).verify(quote.signature, quote.signed_bytes())
    except (InvalidSignature, ValueError):
        return False
    return True
