import os

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from hypothesis import given, settings, strategies as st

from shieldrun.attestation import (
    CasServer, CasService, SecretsBundle, SecretsRegistry, decode_message, encode_message, provision,
)
from shieldrun.enclave import EnclaveConfig, create_enclave
from shieldrun.errors import NonceReused, ProvisioningFailed, SignatureInvalid, UnknownMeasurement
from shieldrun.fsshield import PathPolicy, ShieldMode
from shieldrun.quote import AttestationQuote, Platform


@pytest.fixture
def setup():
    plat = Platform()
    enc = create_enclave(b"trusted-app", EnclaveConfig(), platform=plat)
    reg = SecretsRegistry()
    bundle = SecretsBundle.generate([PathPolicy("/data", ShieldMode.ENCRYPT_AUTH)])
    reg.register(enc.measurement, bundle)
    return plat, enc, reg, bundle


def test_release_for_registered_measurement(setup):
    plat, enc, reg, bundle = setup
    svc = CasService(reg, plat.verification_key)
    nonce = svc.issue_nonce()
    assert svc.verify_and_release(enc.quote(nonce), nonce) == bundle


def test_nonce_reuse_and_unissued_nonce(setup):
    plat, enc, reg, _ = setup
    svc = CasService(reg, plat.verification_key)
    nonce = svc.issue_nonce()
    q = enc.quote(nonce)
    svc.verify_and_release(q, nonce)
    with pytest.raises(NonceReused):
        svc.verify_and_release(q, nonce)
    with pytest.raises(NonceReused):
        svc.verify_and_release(enc.quote(os.urandom(16)))
    other = svc.issue_nonce()
    with pytest.raises(NonceReused):
        svc.verify_and_release(enc.quote(other), svc.issue_nonce())


def test_unknown_measurement_and_bad_signature(setup):
    plat, _, reg, _ = setup
    svc = CasService(reg, plat.verification_key)
    rogue = create_enclave(b"rogue-app", EnclaveConfig(), platform=plat)
    with pytest.raises(UnknownMeasurement):
        svc.verify_and_release(rogue.quote(svc.issue_nonce()))
    forged = create_enclave(b"trusted-app", EnclaveConfig(), platform=Platform())
    with pytest.raises(SignatureInvalid):
        svc.verify_and_release(forged.quote(svc.issue_nonce()))


@settings(max_examples=100)
@given(st.integers(0, 112 * 8 - 1))
def test_tampered_quote_never_released(bit):
    plat = Platform()
    enc = create_enclave(b"x", EnclaveConfig(), platform=plat)
    reg = SecretsRegistry()
    reg.register(enc.measurement, SecretsBundle.generate())
    svc = CasService(reg, plat.verification_key)
    raw = bytearray(enc.quote(svc.issue_nonce()).to_bytes())
    raw[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises((SignatureInvalid, NonceReused, UnknownMeasurement, ValueError)):
        svc.verify_and_release(AttestationQuote.from_bytes(bytes(raw)))


def test_message_framing():
    assert decode_message(encode_message(3, b"abc")) == (3, b"abc")
    for bad in (b"", b"\x00\x00\x00\x05\x01ab", encode_message(1, b"x") + b"!"):
        with pytest.raises(ValueError):
            decode_message(bad)


def test_registry_roundtrip(tmp_path, key, setup):
    _, enc, reg, bundle = setup
    reg.save(tmp_path / "reg.tsfs", key)
    assert b"fs_key" not in (tmp_path / "reg.tsfs").read_bytes()
    again = SecretsRegistry.load(tmp_path / "reg.tsfs", key)
    assert again.lookup(enc.measurement.digest) == bundle


def test_provision_over_tcp(setup):
    plat, enc, reg, bundle = setup
    cas_id = Ed25519PrivateKey.generate()
    server = CasServer(CasService(reg, plat.verification_key), cas_id).start()
    try:
        got = provision(enc, server.address, cas_identity=server.public_key)
        assert got == bundle
        assert enc.provisioned and enc.config.fs_keys == bundle.fs_key
        with pytest.raises(ProvisioningFailed):
            provision(enc, server.address, cas_identity=server.public_key)
        rogue = create_enclave(b"rogue", EnclaveConfig(), platform=plat)
        with pytest.raises(ProvisioningFailed, match="unknown-measurement"):
            provision(rogue, server.address, cas_identity=server.public_key)
        impostor = create_enclave(b"trusted-app", EnclaveConfig(), platform=plat)
        with pytest.raises(ProvisioningFailed):
            provision(impostor, server.address, cas_identity=bytes(32))
    finally:
        server.stop()
    assert not rogue.provisioned


def test_provision_unreachable(setup):
    _, enc, _, _ = setup
    with pytest.raises(ProvisioningFailed):
        provision(enc, ("127.0.0.1", 1), timeout=1.0)
