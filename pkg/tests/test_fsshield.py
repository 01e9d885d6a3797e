import os
import random

import pytest
from hypothesis import given, settings, strategies as st

from oracles import SparseFile
from shieldrun.errors import HeaderCorrupt, KeyMissing, TamperDetected
from shieldrun.fsshield import (
    HEADER_SIZE, FileShield, PathPolicy, ShieldMode, format_policy_file, parse_policy_file, policy_for,
)
from shieldrun.syscalls import DirectIO

ENC = ShieldMode.ENCRYPT_AUTH


def shield(tmp_path, key, mode=ENC, chunk=64):
    return FileShield(DirectIO(), [PathPolicy(str(tmp_path), mode)], key=key, chunk_size=chunk)


def test_policy_longest_prefix_and_components():
    pols = [PathPolicy("/data", ENC), PathPolicy("/data/public", ShieldMode.PASSTHROUGH),
            PathPolicy("/logs", ShieldMode.AUTH_ONLY)]
    assert policy_for("/data/x", pols) is ENC
    assert policy_for("/data/public/y", pols) is ShieldMode.PASSTHROUGH
    assert policy_for("/database", pols) is ShieldMode.PASSTHROUGH
    assert policy_for("/logs/a", pols) is ShieldMode.AUTH_ONLY
    assert policy_for("/etc/passwd", pols) is ShieldMode.PASSTHROUGH


def test_policy_file_roundtrip():
    pols = [PathPolicy("/data", ENC), PathPolicy("/logs", ShieldMode.AUTH_ONLY)]
    assert parse_policy_file(format_policy_file(pols)) == pols


def test_roundtrip_and_ciphertext(tmp_path, key):
    fs = shield(tmp_path, key)
    path = str(tmp_path / "secret.bin")
    data = b"attack at dawn " * 50
    fs.write_file(path, data)
    fs.close_all()
    raw = open(path, "rb").read()
    assert b"attack" not in raw
    assert raw[:4] == b"TSFS"
    assert shield(tmp_path, key).read_file(path) == data


def test_auth_only_is_readable_on_disk(tmp_path, key):
    fs = shield(tmp_path, key, ShieldMode.AUTH_ONLY)
    path = str(tmp_path / "log.txt")
    fs.write_file(path, b"visible text")
    fs.close_all()
    assert b"visible text" in open(path, "rb").read()
    assert shield(tmp_path, key, ShieldMode.AUTH_ONLY).read_file(path) == b"visible text"


def test_passthrough_is_plain(tmp_path, key):
    fs = FileShield(DirectIO(), [], key=None)
    path = str(tmp_path / "p.txt")
    fs.write_file(path, b"plain")
    fs.close_all()
    assert open(path, "rb").read() == b"plain"


def test_key_missing(tmp_path):
    fs = FileShield(DirectIO(), [PathPolicy(str(tmp_path), ENC)])
    with pytest.raises(KeyMissing):
        fs.open(str(tmp_path / "x"))


def test_wrong_key_rejected(tmp_path, key):
    path = str(tmp_path / "f")
    shield(tmp_path, key).write_file(path, b"data")
    with pytest.raises(TamperDetected):
        shield(tmp_path, bytes(32)).read_file(path)


def test_mode_mismatch_is_header_corrupt(tmp_path, key):
    path = str(tmp_path / "f")
    shield(tmp_path, key).write_file(path, b"data")
    with pytest.raises(HeaderCorrupt):
        shield(tmp_path, key, ShieldMode.AUTH_ONLY).read_file(path)


def test_truncation_detected(tmp_path, key):
    path = str(tmp_path / "f")
    shield(tmp_path, key).write_file(path, os.urandom(300))
    with open(path, "r+b") as fh:
        fh.truncate(os.path.getsize(path) - 5)
    with pytest.raises(TamperDetected):
        shield(tmp_path, key).read_file(path)


def test_chunk_swap_detected(tmp_path, key):
    path = str(tmp_path / "f")
    shield(tmp_path, key, chunk=64).write_file(path, bytes(range(256)))
    raw = bytearray(open(path, "rb").read())
    rec = 12 + 64 + 16
    a = raw[HEADER_SIZE:HEADER_SIZE + rec]
    b = raw[HEADER_SIZE + rec:HEADER_SIZE + 2 * rec]
    raw[HEADER_SIZE:HEADER_SIZE + rec], raw[HEADER_SIZE + rec:HEADER_SIZE + 2 * rec] = b, a
    open(path, "wb").write(raw)
    with pytest.raises(TamperDetected):
        shield(tmp_path, key, chunk=64).read_file(path)


def test_cross_file_splice_detected(tmp_path, key):
    p1, p2 = str(tmp_path / "a"), str(tmp_path / "b")
    fs = shield(tmp_path, key)
    fs.write_file(p1, b"A" * 64)
    fs.write_file(p2, b"B" * 64)
    fs.close_all()
    r1, r2 = open(p1, "rb").read(), open(p2, "rb").read()
    open(p2, "wb").write(r2[:HEADER_SIZE] + r1[HEADER_SIZE:])
    with pytest.raises(TamperDetected):
        shield(tmp_path, key).read_file(p2)


def test_rollback_within_session_detected(tmp_path, key):
    path = str(tmp_path / "f")
    fs = shield(tmp_path, key)
    fs.write_file(path, b"v1" * 32)
    old = open(path, "rb").read()
    fs.write(path, 0, b"v2" * 32)
    fs.flush(path)
    assert fs.read(path, 0, 4) == b"v2v2"
    open(path, "wb").write(old)
    fs.files[path].dirty.clear()
    with pytest.raises(TamperDetected):
        fs.read(path, 0, 4)


def test_random_bit_flips(tmp_path, key):
    path = str(tmp_path / "f")
    data = os.urandom(500)
    shield(tmp_path, key).write_file(path, data)
    clean = open(path, "rb").read()
    rng = random.Random(7)
    for _ in range(100):
        bit = rng.randrange(len(clean) * 8)
        raw = bytearray(clean)
        raw[bit // 8] ^= 1 << (bit % 8)
        open(path, "wb").write(raw)
        with pytest.raises(TamperDetected):
            shield(tmp_path, key).read_file(path)


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 400), st.binary(min_size=0, max_size=150)), max_size=12),
       st.sampled_from([ShieldMode.ENCRYPT_AUTH, ShieldMode.AUTH_ONLY]))
def test_random_writes_match_reference(tmp_path_factory, ops, mode):
    d = tmp_path_factory.mktemp("fs")
    key = bytes(32)
    path = str(d / "f")
    fs = shield(d, key, mode, chunk=64)
    fs.open(path, truncate=True)
    ref = SparseFile()
    for i, (off, chunk) in enumerate(ops):
        fs.write(path, off, chunk)
        ref.write(off, chunk)
        if i % 3 == 2:
            fs.flush(path)
    assert fs.read(path, 0, 10_000) == bytes(ref.data)
    fs.close_all()
    fresh = shield(d, key, mode, chunk=64)
    assert fresh.read_file(path) == bytes(ref.data)
    assert fresh.read(path, 37, 100) == ref.read(37, 100)
