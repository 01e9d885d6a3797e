import os

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from hypothesis import given, settings, strategies as st

from chan_util import Recorder, channel_pair
from shieldrun.enclave import EnclaveConfig, create_enclave
from shieldrun.errors import (
    AuthFailure, ChannelClosed, ChannelError, Downgrade, IntegrityFailure, MeasurementMismatch, ReplayDetected,
)
from shieldrun.netshield import MAX_RECORD, PeerPolicy, identity_public, load_identity, save_identity, seal_record
from shieldrun.quote import Platform


def test_plain_handshake_and_messages():
    c, s, _, _ = channel_pair()
    c.send(b"hello")
    assert s.recv() == b"hello"
    s.send(b"")
    assert c.recv() == b""
    big = os.urandom(3 * MAX_RECORD + 17)
    c.send(big)
    assert s.recv() == big
    c.close()
    with pytest.raises(ChannelClosed):
        s.recv()


def test_records_are_bounded():
    c, s, a, _ = channel_pair()
    a.sent.clear()
    c.send(os.urandom(50_000))
    assert all(len(r) <= 12 + MAX_RECORD for r in a.sent)
    assert s.recv()


def test_peer_identity_reported_and_pinned():
    sid = Ed25519PrivateKey.generate()
    c, s, _, _ = channel_pair(client_kw={"peer": PeerPolicy(pinned_identity=identity_public(sid))}, server_id=sid)
    assert c.peer_identity == identity_public(sid)
    c2, s2, _, _ = channel_pair(client_kw={"peer": PeerPolicy(pinned_identity=bytes(32))})
    assert isinstance(c2, AuthFailure)


def _quoting_enclave(platform, code=b"app"):
    return create_enclave(code, EnclaveConfig(), platform=platform)


def test_mutual_attestation():
    plat = Platform()
    enc = _quoting_enclave(plat)
    c, s, _, _ = channel_pair(
        client_kw={"quoter": enc.quote},
        server_kw={"peer": PeerPolicy(platform_key=plat.verification_key, expected_peer=enc.measurement.digest)})
    assert s.peer_measurement == enc.measurement.digest
    c.send(b"x")
    assert s.recv() == b"x"


def test_measurement_mismatch():
    plat = Platform()
    enc = _quoting_enclave(plat, b"evil")
    c, s, _, _ = channel_pair(
        client_kw={"quoter": enc.quote},
        server_kw={"peer": PeerPolicy(platform_key=plat.verification_key, expected_peer=bytes(32))})
    assert isinstance(s, MeasurementMismatch)


def test_missing_quote_is_downgrade():
    plat = Platform()
    c, s, _, _ = channel_pair(server_kw={"peer": PeerPolicy(platform_key=plat.verification_key, require_quote=True)})
    assert isinstance(s, Downgrade)


def test_quote_from_other_platform_rejected():
    plat, rogue = Platform(), Platform()
    enc = _quoting_enclave(rogue)
    c, s, _, _ = channel_pair(client_kw={"quoter": enc.quote},
                              server_kw={"peer": PeerPolicy(platform_key=plat.verification_key, require_quote=True)})
    assert isinstance(s, AuthFailure)


def test_identity_storage_through_file_shield(tmp_path, key):
    from shieldrun.fsshield import FileShield, PathPolicy, ShieldMode
    from shieldrun.syscalls import DirectIO

    fs = FileShield(DirectIO(), [PathPolicy(str(tmp_path), ShieldMode.ENCRYPT_AUTH)], key=key)
    ident = Ed25519PrivateKey.generate()
    save_identity(fs, str(tmp_path / "id.key"), ident)
    fs.close_all()
    again = load_identity(FileShield(DirectIO(), [PathPolicy(str(tmp_path), ShieldMode.ENCRYPT_AUTH)], key=key),
                          str(tmp_path / "id.key"))
    assert identity_public(again) == identity_public(ident)


def _records(channel, messages):
    rec = Recorder()
    channel.transport, saved = rec, channel.transport
    for m in messages:
        channel.send(m)
    channel.transport = saved
    return rec.sent


def test_replay_detected():
    c, s, _, b = channel_pair()
    recs = _records(c, [b"one", b"two"])
    b.inject(recs[0] + recs[0])
    assert s.recv() == b"one"
    with pytest.raises(ReplayDetected):
        s.recv()
    with pytest.raises(ChannelClosed):
        s.recv()  # errors are fatal


def test_reorder_and_modify_detected():
    c, s, _, b = channel_pair()
    recs = _records(c, [b"one", b"two"])
    b.inject(recs[1])
    with pytest.raises(IntegrityFailure):
        s.recv()
    c, s, _, b = channel_pair()
    rec = bytearray(_records(c, [b"payload"])[0])
    rec[-1] ^= 1
    b.inject(bytes(rec))
    with pytest.raises(IntegrityFailure):
        s.recv()


def test_forged_record_with_wrong_key():
    c, s, _, b = channel_pair()
    b.inject(seal_record(os.urandom(32), 0, b"\x00forged"))
    with pytest.raises(IntegrityFailure):
        s.recv()


@settings(max_examples=60)
@given(st.lists(st.binary(max_size=40), min_size=1, max_size=5), st.data())
def test_adversary_never_alters_data(messages, data):
    c, s, _, b = channel_pair()
    recs = _records(c, messages)
    action = data.draw(st.sampled_from(["flip", "drop", "dup", "swap", "truncate"]))
    i = data.draw(st.integers(0, len(recs) - 1))
    evil = list(recs)
    if action == "flip":
        r = bytearray(evil[i])
        bit = data.draw(st.integers(0, len(r) * 8 - 1))
        r[bit // 8] ^= 1 << (bit % 8)
        evil[i] = bytes(r)
    elif action == "drop":
        del evil[i]
    elif action == "dup":
        evil.insert(i, evil[i])
    elif action == "swap" and len(evil) > 1:
        j = (i + 1) % len(evil)
        evil[i], evil[j] = evil[j], evil[i]
    elif action == "truncate":
        evil[i] = evil[i][:-1]
    b.inject(b"".join(evil))
    b.close()
    got = []
    try:
        for _ in messages:
            got.append(s.recv())
    except ChannelError:
        pass
    assert got == messages[:len(got)]
    if evil != recs:
        assert len(got) < len(messages) or got == messages  # nothing altered slips through
