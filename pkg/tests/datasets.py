"""Small synthetic datasets for training checks."""

from __future__ import annotations

import numpy as np

from shieldrun.tensor import Session, build_cifar_model, one_hot


def separable_set(n: int = 200, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(labels [n], images float32 [n,24,24,3]): one flat hue per class plus mild noise."""
    rng = np.random.default_rng(seed)
    # hues on a circle around the gray axis, so every class is an extreme point
    theta = 2 * np.pi * np.arange(10) / 10
    u = np.array([1, -1, 0]) / np.sqrt(2)
    v = np.array([1, 1, -2]) / np.sqrt(6)
    palette = (0.5 + 0.4 * (np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v)).astype(np.float32)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = palette[labels][:, None, None, :] + rng.normal(0, 0.05, (n, 24, 24, 3))
    return labels, np.clip(images, 0, 1).astype(np.float32)


def train_separable(steps: int = 200, batch: int = 32, lr: float = 0.05, seed: int = 0) -> float:
    """Train the network on :func:`separable_set`; returns train accuracy."""
    labels, images = separable_set(seed=seed)
    sess = Session(build_cifar_model(lr=lr, seed=seed))
    sess.initialize()
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.integers(0, len(labels), batch)
        sess.run("train_op", {"input": images[idx], "labels": one_hot(labels[idx])})
    logits = sess.run("logits", {"input": images})
    return float((logits.argmax(1) == labels).mean())
