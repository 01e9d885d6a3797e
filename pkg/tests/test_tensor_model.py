import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shieldrun.errors import (
    CorruptFile, Deadlock, EndOfData, FormatVersionUnknown, LabelOutOfRange, QueueClosed, RecordTruncated,
    TamperDetected,
)
from shieldrun.fsshield import FileShield, PathPolicy, ShieldMode
from shieldrun.syscalls import DirectIO
from shieldrun.tensor import (
    FifoQueue, Graph, RecordSource, Session, augment, augment_with, build_cifar_model, central_crop,
    decode_records, encode_records, one_hot, synthetic_cifar,
)
from shieldrun.tensor.formats import (
    checkpoint_from_bytes, checkpoint_to_bytes, export_frozen, graph_from_bytes, graph_to_bytes, import_frozen,
)
from shieldrun.tensor.model import INTERFACE, dense_parameter_count

F32 = np.float32


def test_interface_and_parameter_count():
    g = build_cifar_model()
    for name in INTERFACE:
        assert name in g
    assert dense_parameter_count() == 2304 * 384 + 384 + 384 * 192 + 192 + 192 * 10 + 10
    sess = Session(g)
    sess.initialize()
    sizes = {k: v.size for k, v in sess.checkpoint().items() if k.startswith("fc")}
    assert sum(sizes.values()) == dense_parameter_count()


def test_zero_init_gives_uniform_probabilities():
    sess = Session(build_cifar_model(init="zeros"))
    sess.initialize()
    x = np.random.default_rng(0).random((128, 24, 24, 3), dtype=F32)
    logits, probs = sess.run(["logits", "probs"], {"input": x})
    assert logits.shape == (128, 10)
    assert np.all(probs == F32(0.1))


def test_initialization_is_seeded():
    a, b = Session(build_cifar_model(seed=4)), Session(build_cifar_model(seed=4))
    a.initialize()
    b.initialize()
    assert all(np.array_equal(a.checkpoint()[k], b.checkpoint()[k]) for k in a.checkpoint())
    w = a.checkpoint()["conv1/weights"]
    assert np.abs(w).max() <= 2 * 0.05 + 1e-7


def test_small_lr_loss_is_monotone():
    labels, images = synthetic_cifar(64, seed=1)
    x = central_crop(images.astype(F32) / 255)
    y = one_hot(labels)
    sess = Session(build_cifar_model(lr=1e-3, seed=1))
    sess.initialize()
    losses = [float(sess.run("train_op", {"input": x, "labels": y})) for _ in range(20)]
    assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


# -- augmentation -------------------------------------------------------------------

@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_augment_is_deterministic_and_bounded(seed):
    img = np.random.default_rng(seed).random((32, 32, 3), dtype=F32)
    a = augment(img, np.random.default_rng(seed))
    b = augment(img, np.random.default_rng(seed))
    assert np.array_equal(a, b)
    assert a.shape == (24, 24, 3) and a.min() >= 0 and a.max() <= 1


def test_identity_augmentation_is_crop():
    img = np.random.default_rng(0).random((32, 32, 3), dtype=F32) * F32(0.5) + F32(0.25)
    out = augment_with(img, (0, 0), False, 0.0, 1.0)
    assert np.allclose(out, img[:24, :24], atol=1e-6)


@settings(max_examples=30)
@given(st.floats(0.05, 0.95), st.floats(0.6, 1.4))
def test_gray_is_fixed_by_saturation(v, scale):
    img = np.full((32, 32, 3), v, F32)
    assert np.array_equal(augment_with(img, (3, 5), True, 0.0, scale), img[:24, :24])


def test_graph_augmentation_matches_reference():
    labels, images = synthetic_cifar(1, seed=2)
    img = images[0].astype(F32) / 255
    g = Graph(seed=0)
    g.add("x", "placeholder", shape=[32, 32, 3])
    g.add("c", "crop", ["x"], size=24, origin=[2, 5])
    g.add("f", "flip", ["c"], flip=True)
    g.add("b", "brightness", ["f"], delta=0.1)
    g.add("s", "saturation", ["b"], scale=0.7)
    g.finalize()
    out = Session(g).run("s", {"x": img})
    assert np.allclose(out, augment_with(img, (2, 5), True, 0.1, 0.7), atol=1e-6)


# -- records and queues -------------------------------------------------------------

def test_record_codec_roundtrip():
    labels, images = synthetic_cifar(5, seed=3)
    l2, i2 = decode_records(encode_records(labels, images))
    assert np.array_equal(l2, labels)
    assert np.array_equal(np.round(i2 * 255).astype(np.uint8), images)


def test_record_errors():
    labels, images = synthetic_cifar(2)
    raw = bytearray(encode_records(labels, images))
    with pytest.raises(RecordTruncated):
        decode_records(bytes(raw[:-1]))
    raw[0] = 10
    with pytest.raises(LabelOutOfRange):
        decode_records(bytes(raw))


def _shielded(tmp_path, key, raw):
    fs = FileShield(DirectIO(), [PathPolicy(str(tmp_path), ShieldMode.ENCRYPT_AUTH)], key=key)
    fs.write_file(str(tmp_path / "data.bin"), raw)
    fs.close_all()
    return FileShield(DirectIO(), [PathPolicy(str(tmp_path), ShieldMode.ENCRYPT_AUTH)], key=key)


def test_reader_feeds_queue_then_stops(tmp_path, key):
    labels, images = synthetic_cifar(2)
    fs = _shielded(tmp_path, key, encode_records(labels, images))
    g = build_cifar_model(batch=1)
    sess = Session(g)
    sess.bind_reader("reader", RecordSource(fs, str(tmp_path / "data.bin")))
    sess.run("enqueue")
    sess.run("enqueue")
    with pytest.raises(EndOfData):
        sess.run("enqueue")
    got = [int(sess.run("dequeue:1")[0]) for _ in range(2)]
    assert got == labels.tolist()
    with pytest.raises(Deadlock):
        sess.run("dequeue")
    sess.queue("queue").close()
    with pytest.raises(QueueClosed):
        sess.run("dequeue")


def test_tampered_records_expose_nothing(tmp_path, key):
    labels, images = synthetic_cifar(3)
    _shielded(tmp_path, key, encode_records(labels, images))
    path = tmp_path / "data.bin"
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x20
    path.write_bytes(bytes(raw))
    fs = FileShield(DirectIO(), [PathPolicy(str(tmp_path), ShieldMode.ENCRYPT_AUTH)], key=key)
    src = RecordSource(fs, str(path))
    with pytest.raises(TamperDetected):
        src.next()
    assert src._labels is None


def test_fifo_queue_order_and_capacity():
    q = FifoQueue(2)
    q.enqueue(1)
    q.enqueue(2)
    with pytest.raises(Deadlock):
        q.enqueue(3)
    assert q.dequeue_many(2) == [1, 2]


# -- formats ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    sess = Session(build_cifar_model(seed=5))
    sess.initialize()
    return sess


def test_frozen_roundtrip(tmp_path, trained):
    g = trained.graph
    data = graph_to_bytes(g, trained.checkpoint())
    again = graph_from_bytes(data)
    assert graph_to_bytes(again) == data
    blank = graph_from_bytes(graph_to_bytes(g))
    assert blank == g
    export_frozen(g, str(tmp_path / "m.tscg"), trained.checkpoint())
    imported = Session(import_frozen(str(tmp_path / "m.tscg")))
    imported.initialize()
    x = np.random.default_rng(1).random((4, 24, 24, 3), dtype=F32)
    assert np.array_equal(imported.run("logits", {"input": x}), trained.run("logits", {"input": x}))


def test_blank_slate_plus_restore_equals_folded(trained):
    blank = Session(graph_from_bytes(graph_to_bytes(trained.graph)))
    blank.initialize()
    blank.restore(trained.checkpoint())
    folded = Session(graph_from_bytes(graph_to_bytes(trained.graph, trained.checkpoint())))
    folded.initialize()
    assert all(np.array_equal(blank.checkpoint()[k], folded.checkpoint()[k]) for k in trained.checkpoint())


def test_corrupt_and_unknown_version(trained):
    data = graph_to_bytes(trained.graph)
    with pytest.raises(CorruptFile):
        graph_from_bytes(data[:-10])
    bad = bytearray(data)
    bad[len(bad) // 2] ^= 1
    with pytest.raises(CorruptFile):
        graph_from_bytes(bytes(bad))
    with pytest.raises(CorruptFile):
        graph_from_bytes(b"NOPE" + data[4:])
    with pytest.raises(FormatVersionUnknown):
        graph_from_bytes(data[:4] + (2).to_bytes(4, "little") + data[8:])


def test_checkpoint_roundtrip(trained):
    ck = trained.checkpoint()
    again = checkpoint_from_bytes(checkpoint_to_bytes(ck))
    assert sorted(again) == sorted(ck)
    assert all(np.array_equal(again[k], ck[k]) for k in ck)
    with pytest.raises(CorruptFile):
        checkpoint_from_bytes(checkpoint_to_bytes(ck) + b"x")
