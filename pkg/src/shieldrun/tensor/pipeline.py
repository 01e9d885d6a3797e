"""Input pipeline: fixed-length record reader, bounded FIFO queue, augmentation."""

from __future__ import annotations

from collections import deque
from typing import Any, Protocol

import numpy as np

from .. import scheduler as sched_mod
from ..errors import Deadlock, EndOfData, LabelOutOfRange, QueueClosed, RecordTruncated
from .ops import F32, _luma

IMAGE_SIDE = 32
CHANNELS = 3
IMAGE_BYTES = IMAGE_SIDE * IMAGE_SIDE * CHANNELS
RECORD_BYTES = 1 + IMAGE_BYTES
NUM_CLASSES = 10
QUEUE_CAPACITY = 512


class ReadableFS(Protocol):
    def read_file(self, path: str) -> bytes: ...


class FifoQueue:
    """Bounded FIFO whose blocking goes through the green scheduler's wait queues.

    Outside a scheduler loop an operation that would block raises Deadlock.
    """

    def __init__(self, capacity: int = QUEUE_CAPACITY, scheduler: Any = None) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.scheduler = scheduler
        self.items: deque = deque()
        self.closed = False
        self._not_empty = ("queue-not-empty", id(self))
        self._not_full = ("queue-not-full", id(self))

    def __len__(self) -> int:
        return len(self.items)

    def _sched(self):
        s = self.scheduler or sched_mod.current()
        if s is None or not s.in_green_thread():
            raise Deadlock("queue operation would block outside a green thread")
        return s

    def enqueue(self, item: Any) -> None:
        while len(self.items) >= self.capacity and not self.closed:
            self._sched().block_on(self._not_full)
        if self.closed:
            raise QueueClosed("enqueue on a closed queue")
        self.items.append(item)
        s = self.scheduler or sched_mod.current()
        if s is not None:
            s.wake(self._not_empty)

    def dequeue(self) -> Any:
        while not self.items:
            if self.closed:
                raise QueueClosed("queue closed and drained")
            self._sched().block_on(self._not_empty)
        item = self.items.popleft()
        s = self.scheduler or sched_mod.current()
        if s is not None:
            s.wake(self._not_full)
        return item

    def dequeue_many(self, n: int) -> list:
        return [self.dequeue() for _ in range(n)]

    def close(self) -> None:
        self.closed = True
        s = self.scheduler or sched_mod.current()
        if s is not None:
            s.wake(self._not_empty, all=True)
            s.wake(self._not_full, all=True)


def decode_records(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """CIFAR-10 binary layout -> (labels int64 [n], images float32 [n,32,32,3] in [0,1])."""
    if len(raw) % RECORD_BYTES:
        raise RecordTruncated(f"{len(raw)} bytes is not a whole number of {RECORD_BYTES}-byte records")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = buf[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise LabelOutOfRange(f"record {int(bad[0])} has label {int(labels[bad[0]])}")
    planes = buf[:, 1:].reshape(-1, CHANNELS, IMAGE_SIDE, IMAGE_SIDE).transpose(0, 2, 3, 1)
    return labels, planes.astype(F32) / F32(255)


def encode_records(labels: np.ndarray, images: np.ndarray) -> bytes:
    """Inverse of :func:`decode_records` for uint8 images [n,32,32,3]."""
    images = np.asarray(images, dtype=np.uint8)
    out = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = images.transpose(0, 3, 1, 2).reshape(len(labels), -1)
    return out.tobytes()


class RecordSource:
    """Yields (label, image) from a record file read through a file system shield.

    The whole file is read and verified before the first record is handed
    out, so a tampered file never leaks a sample.
    """

    def __init__(self, fs: ReadableFS, path: str, epochs: int | None = 1) -> None:
        self.fs = fs
        self.path = path
        self.epochs = epochs
        self.epoch = 0
        self._labels: np.ndarray | None = None
        self._images: np.ndarray | None = None
        self._pos = 0

    def next(self) -> tuple[int, np.ndarray]:
        if self._labels is None or self._pos >= len(self._labels):
            if self.epochs is not None and self.epoch >= self.epochs:
                raise EndOfData(f"{self.path}: end of data after {self.epoch} epoch(s)")
            self._labels, self._images = decode_records(self.fs.read_file(self.path))
            self._pos = 0
            self.epoch += 1
            if not len(self._labels):
                raise EndOfData(f"{self.path}: no records")
        i = self._pos
        self._pos += 1
        return int(self._labels[i]), self._images[i]


def augment(image: np.ndarray, rng: np.random.Generator, size: int = 24) -> np.ndarray:
    """Random crop, horizontal flip, brightness and saturation, in that order."""
    image = np.asarray(image, dtype=F32)
    h, w = image.shape[0], image.shape[1]
    oy = int(rng.integers(0, h - size + 1))
    ox = int(rng.integers(0, w - size + 1))
    flip = rng.random() < 0.5
    delta = rng.uniform(-0.25, 0.25)
    scale = rng.uniform(0.6, 1.4)
    return augment_with(image, (oy, ox), flip, delta, scale, size)


def augment_with(image: np.ndarray, origin: tuple[int, int], flip: bool, delta: float,
                 scale: float, size: int = 24) -> np.ndarray:
    oy, ox = origin
    out = image[oy:oy + size, ox:ox + size, :]
    if flip:
        out = out[:, ::-1, :]
    out = np.clip(out + F32(delta), F32(0), F32(1))
    lum = _luma(out)
    return np.ascontiguousarray(np.clip(lum + F32(scale) * (out - lum), F32(0), F32(1)))


def central_crop(image: np.ndarray, size: int = 24) -> np.ndarray:
    h, w = image.shape[-3], image.shape[-2]
    oy, ox = (h - size) // 2, (w - size) // 2
    return np.ascontiguousarray(image[..., oy:oy + size, ox:ox + size, :])


# ten well separated base colours; class identity is carried by mean chroma
_PALETTE = np.array([
    [0.85, 0.20, 0.20], [0.20, 0.80, 0.25], [0.20, 0.30, 0.85], [0.85, 0.80, 0.20],
    [0.80, 0.25, 0.80], [0.20, 0.80, 0.80], [0.90, 0.55, 0.15], [0.50, 0.20, 0.75],
    [0.55, 0.75, 0.20], [0.50, 0.50, 0.50],
], dtype=np.float64)


def synthetic_cifar(n: int = 2000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic CIFAR-shaped data: (labels uint8 [n], images uint8 [n,32,32,3]).

    Each class has a base colour; images add a smooth random texture, a
    brightness offset and pixel noise, so labels follow from pixel statistics.
    """
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % NUM_CLASSES).astype(np.uint8)
    rng.shuffle(labels)
    coarse = rng.normal(0.0, 0.12, size=(n, 4, 4, CHANNELS))
    texture = np.repeat(np.repeat(coarse, 8, axis=1), 8, axis=2)
    offset = rng.uniform(-0.1, 0.1, size=(n, 1, 1, 1))
    noise = rng.normal(0.0, 0.05, size=(n, IMAGE_SIDE, IMAGE_SIDE, CHANNELS))
    img = _PALETTE[labels][:, None, None, :] + texture + offset + noise
    return labels, np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def one_hot(labels, classes: int = NUM_CLASSES) -> np.ndarray:
    return np.eye(classes, dtype=F32)[np.asarray(labels, dtype=np.int64)]
