"""Pure tensor ops: forward, backward and a flop estimate for each.

Stateful kinds (variable, placeholder, record_reader, fifo_queue,
sgd_apply) live in the session.  Every array here is float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch
from .graph import Node

F32 = np.float32
LUMA = np.array([0.299, 0.587, 0.114], dtype=F32)

Arrays = Sequence[np.ndarray]


def f32(x) -> np.ndarray:
    return np.asarray(x, dtype=F32)


@dataclass(frozen=True)
class OpDef:
    forward: Callable[[Node, Arrays, "OpContext"], tuple[np.ndarray, ...]]
    backward: Callable[[Node, Arrays, Arrays, Arrays], list] | None
    flops: Callable[[Node, Arrays, Arrays], int]


class OpContext:
    """Randomness source for augmentation ops; one stream per node."""

    def __init__(self, rng_for: Callable[[str], np.random.Generator]) -> None:
        self.rng_for = rng_for


def _elems(_n, xs, ys) -> int:
    return int(sum(y.size for y in ys))


# -- matmul / add -------------------------------------------------------------

def matmul_fwd(n, xs, ctx):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"{n.name}: matmul {a.shape} x {b.shape}")
    return (a @ b,)


def matmul_bwd(n, xs, ys, gys):
    a, b = xs
    g = gys[0]
    return [g @ b.T, a.T @ g]


def matmul_flops(n, xs, ys):
    a, b = xs
    return 2 * a.shape[0] * a.shape[1] * b.shape[1]


def add_fwd(n, xs, ctx):
    a, b = xs
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{n.name}: add {a.shape} + {b.shape}") from None
    if shape != a.shape and shape != b.shape:
        raise ShapeMismatch(f"{n.name}: add broadcasts both operands {a.shape} + {b.shape}")
    return (a + b,)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add_bwd(n, xs, ys, gys):
    g = gys[0]
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


# -- conv2d (NHWC, HWIO weights, SAME padding, stride 1) ------------------------

def _pads(k: int) -> tuple[int, int]:
    return (k - 1) // 2, k // 2


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = x.shape
    ph, pw = _pads(kh), _pads(kw)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # n,h,w,c,kh,kw
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, kh * kw * c)


def conv2d_fwd(n, xs, ctx):
    x, k = xs
    if x.ndim != 4 or k.ndim != 4 or x.shape[3] != k.shape[2]:
        raise ShapeMismatch(f"{n.name}: conv2d input {x.shape} kernel {k.shape}")
    kh, kw, cin, cout = k.shape
    cols = _im2col(x, kh, kw)
    y = cols @ k.reshape(kh * kw * cin, cout)
    return (y.reshape(x.shape[0], x.shape[1], x.shape[2], cout),)


def conv2d_bwd(n, xs, ys, gys):
    x, k = xs
    kh, kw, cin, cout = k.shape
    nb, h, w, _ = x.shape
    g = gys[0].reshape(nb * h * w, cout)
    cols = _im2col(x, kh, kw)
    gk = (cols.T @ g).reshape(k.shape)
    gcols = (g @ k.reshape(kh * kw * cin, cout).T).reshape(nb, h, w, kh, kw, cin)
    ph, pw = _pads(kh), _pads(kw)
    gxp = np.zeros((nb, h + kh - 1, w + kw - 1, cin), dtype=F32)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + h, j:j + w, :] += gcols[:, :, :, i, j, :]
    gx = gxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]
    return [np.ascontiguousarray(gx), gk]


def conv2d_flops(n, xs, ys):
    x, k = xs
    return 2 * x.shape[0] * x.shape[1] * x.shape[2] * int(np.prod(k.shape))


# -- pooling / activations ----------------------------------------------------

def _windows(x: np.ndarray) -> np.ndarray:
    nb, h, w, c = x.shape
    return x.reshape(nb, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(nb, h // 2, w // 2, c, 4)


def maxpool_fwd(n, xs, ctx):
    x = xs[0]
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeMismatch(f"{n.name}: maxpool2x2 needs NHWC with even H, W; got {x.shape}")
    return (_windows(x).max(axis=-1),)


def maxpool_bwd(n, xs, ys, gys):
    x = xs[0]
    nb, h, w, c = x.shape
    win = _windows(x)
    # route gradient to the first maximum of each window only
    onehot = np.eye(4, dtype=F32)[win.argmax(axis=-1)] * gys[0][..., None]
    gx = onehot.reshape(nb, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape)
    return [np.ascontiguousarray(gx)]


def relu_fwd(n, xs, ctx):
    return (np.maximum(xs[0], F32(0)),)


def relu_bwd(n, xs, ys, gys):
    return [gys[0] * (xs[0] > 0)]


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_fwd(n, xs, ctx):
    return (softmax(xs[0]),)


def softmax_bwd(n, xs, ys, gys):
    y, g = ys[0], gys[0]
    return [y * (g - (g * y).sum(axis=-1, keepdims=True))]


def xent_fwd(n, xs, ctx):
    logits, labels = xs
    if logits.shape != labels.shape or logits.ndim != 2:
        raise ShapeMismatch(f"{n.name}: logits {logits.shape} vs labels {labels.shape}")
    loss = -(labels * log_softmax(logits)).sum(axis=-1).mean()
    return (f32(loss),)


def xent_bwd(n, xs, ys, gys):
    logits, labels = xs
    g = gys[0] / F32(logits.shape[0])
    p = softmax(logits)
    gl = (p * labels.sum(axis=-1, keepdims=True) - labels) * g
    return [gl, -log_softmax(logits) * g]


def reshape_fwd(n, xs, ctx):
    x = xs[0]
    try:
        return (x.reshape(tuple(n.attrs["shape"])),)
    except ValueError:
        raise ShapeMismatch(f"{n.name}: cannot reshape {x.shape} to {n.attrs['shape']}") from None


def reshape_bwd(n, xs, ys, gys):
    return [gys[0].reshape(xs[0].shape)]


# -- augmentation ---------------------------------------------------------------
# Each op uses fixed attrs when present and otherwise draws from its node stream.

def _crop_origin(n, x, ctx) -> tuple[int, int]:
    size = int(n.attrs.get("size", 24))
    h, w = x.shape[-3], x.shape[-2]
    if size > h or size > w:
        raise ShapeMismatch(f"{n.name}: crop {size} larger than image {x.shape}")
    if "origin" in n.attrs:
        oy, ox = n.attrs["origin"]
    else:
        rng = ctx.rng_for(n.name)
        oy, ox = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
    if not (0 <= oy <= h - size and 0 <= ox <= w - size):
        raise ShapeMismatch(f"{n.name}: crop origin {(oy, ox)} out of range")
    return oy, ox


def crop_fwd(n, xs, ctx):
    x = xs[0]
    size = int(n.attrs.get("size", 24))
    oy, ox = _crop_origin(n, x, ctx)
    return (x[..., oy:oy + size, ox:ox + size, :].copy(), f32([oy, ox]))


def crop_bwd(n, xs, ys, gys):
    oy, ox = (int(v) for v in ys[1])
    size = ys[0].shape[-2]
    gx = np.zeros_like(xs[0])
    gx[..., oy:oy + size, ox:ox + size, :] = gys[0]
    return [gx]


def flip_fwd(n, xs, ctx):
    do = n.attrs.get("flip")
    if do is None:
        do = bool(ctx.rng_for(n.name).random() < 0.5)
    x = xs[0]
    return (np.ascontiguousarray(x[..., ::-1, :]) if do else x.copy(), f32(1.0 if do else 0.0))


def flip_bwd(n, xs, ys, gys):
    return [np.ascontiguousarray(gys[0][..., ::-1, :]) if ys[1] else gys[0]]


def brightness_fwd(n, xs, ctx):
    delta = n.attrs.get("delta")
    if delta is None:
        m = float(n.attrs.get("max_delta", 0.25))
        delta = ctx.rng_for(n.name).uniform(-m, m)
    return (np.clip(xs[0] + F32(delta), F32(0), F32(1)), f32(delta))


def brightness_bwd(n, xs, ys, gys):
    z = xs[0] + ys[1]
    return [gys[0] * ((z > 0) & (z < 1))]


def _luma(x: np.ndarray) -> np.ndarray:
    lum = (x * LUMA).sum(axis=-1, keepdims=True, dtype=F32)
    # gray pixels keep their value exactly
    gray = (x.max(axis=-1, keepdims=True) == x.min(axis=-1, keepdims=True))
    return np.where(gray, x[..., :1], lum)


def saturation_fwd(n, xs, ctx):
    scale = n.attrs.get("scale")
    if scale is None:
        lo, hi = n.attrs.get("lower", 0.6), n.attrs.get("upper", 1.4)
        scale = ctx.rng_for(n.name).uniform(lo, hi)
    x = xs[0]
    if x.shape[-1] != 3:
        raise ShapeMismatch(f"{n.name}: saturation needs 3 channels, got {x.shape}")
    lum = _luma(x)
    return (np.clip(lum + F32(scale) * (x - lum), F32(0), F32(1)), f32(scale))


def saturation_bwd(n, xs, ys, gys):
    s = ys[1]
    x = xs[0]
    lum = _luma(x)
    z = lum + s * (x - lum)
    gm = gys[0] * ((z > 0) & (z < 1))
    return [s * gm + (F32(1) - s) * LUMA * gm.sum(axis=-1, keepdims=True)]


OPS: dict[str, OpDef] = {
    "matmul": OpDef(matmul_fwd, matmul_bwd, matmul_flops),
    "add": OpDef(add_fwd, add_bwd, _elems),
    "conv2d": OpDef(conv2d_fwd, conv2d_bwd, conv2d_flops),
    "maxpool2x2": OpDef(maxpool_fwd, maxpool_bwd, lambda n, xs, ys: xs[0].size),
    "relu": OpDef(relu_fwd, relu_bwd, _elems),
    "softmax": OpDef(softmax_fwd, softmax_bwd, lambda n, xs, ys: 5 * ys[0].size),
    "softmax_xent_loss": OpDef(xent_fwd, xent_bwd, lambda n, xs, ys: 6 * xs[0].size),
    "reshape": OpDef(reshape_fwd, reshape_bwd, lambda n, xs, ys: 0),
    "crop": OpDef(crop_fwd, crop_bwd, lambda n, xs, ys: ys[0].size),
    "flip": OpDef(flip_fwd, flip_bwd, _elems),
    "brightness": OpDef(brightness_fwd, brightness_bwd, lambda n, xs, ys: 2 * ys[0].size),
    "saturation": OpDef(saturation_fwd, saturation_bwd, lambda n, xs, ys: 8 * ys[0].size),
}

# gradient cost relative to the forward flop estimate
BACKWARD_FACTOR = 2
