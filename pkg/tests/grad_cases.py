"""Random gradient-check cases for every differentiable op."""

from __future__ import annotations

import numpy as np

from oracles import numeric_grad, rel_error
from shieldrun.tensor.graph import Node
from shieldrun.tensor.ops import OPS, OpContext

F32 = np.float32


def _distinct(rng, shape, lo=-1.0, hi=1.0):
    # values at least 1e-2 apart so max and relu kinks stay out of reach of eps
    n = int(np.prod(shape))
    v = np.linspace(lo, hi, n * 4)[rng.permutation(n * 4)[:n]]
    return v.reshape(shape)


def _away_from_zero(rng, shape):
    v = rng.uniform(0.05, 1.0, shape)
    return v * rng.choice([-1.0, 1.0], shape)


def make_case(op: str, rng: np.random.Generator):
    """(attrs, inputs as float64, indices of inputs to differentiate)."""
    r = lambda *s: int(rng.integers(*s))  # noqa: E731
    if op == "matmul":
        m, k, n = r(1, 6), r(1, 6), r(1, 6)
        return {}, [rng.normal(size=(m, k)), rng.normal(size=(k, n))], [0, 1]
    if op == "add":
        m, n = r(1, 5), r(1, 5)
        other = rng.choice(["same", "row", "vec"])
        shape_b = {"same": (m, n), "row": (1, n), "vec": (n,)}[other]
        return {}, [rng.normal(size=(m, n)), rng.normal(size=shape_b)], [0, 1]
    if op == "conv2d":
        nb, h, w, c, co = r(1, 3), r(2, 6), r(2, 6), r(1, 4), r(1, 4)
        kh, kw = r(1, 4), r(1, 4)
        return {}, [rng.normal(size=(nb, h, w, c)), rng.normal(size=(kh, kw, c, co)) * 0.5], [0, 1]
    if op == "maxpool2x2":
        shape = (r(1, 3), 2 * r(1, 4), 2 * r(1, 4), r(1, 4))
        return {}, [_distinct(rng, shape)], [0]
    if op == "relu":
        return {}, [_away_from_zero(rng, (r(1, 5), r(1, 7)))], [0]
    if op == "softmax":
        return {}, [rng.normal(size=(r(1, 5), r(2, 8)))], [0]
    if op == "softmax_xent_loss":
        b, k = r(1, 6), r(2, 10)
        labels = np.eye(k)[rng.integers(0, k, b)]
        return {}, [rng.normal(size=(b, k)), labels], [0, 1]
    if op == "reshape":
        a, b = r(1, 5), r(1, 5)
        return {"shape": [b, a]}, [rng.normal(size=(a, b))], [0]
    if op == "crop":
        h, w = r(3, 8), r(3, 8)
        size = r(1, min(h, w) + 1)
        origin = [r(0, h - size + 1), r(0, w - size + 1)]
        return {"size": size, "origin": origin}, [rng.normal(size=(h, w, 3))], [0]
    if op == "flip":
        return {"flip": bool(r(0, 2))}, [rng.normal(size=(r(1, 3), r(1, 6), r(1, 6), 3))], [0]
    if op == "brightness":
        return {"delta": float(rng.uniform(-0.1, 0.1))}, [rng.uniform(0.2, 0.8, (r(1, 5), r(1, 5), 3))], [0]
    if op == "saturation":
        return ({"scale": float(rng.uniform(0.8, 1.2))},
                [rng.uniform(0.35, 0.65, (r(1, 5), r(1, 5), 3))], [0])
    raise KeyError(op)


DIFFERENTIABLE = ("matmul", "add", "conv2d", "maxpool2x2", "relu", "softmax", "softmax_xent_loss",
                  "reshape", "crop", "flip", "brightness", "saturation")


def grad_error(op: str, seed: int, eps: float = 1e-3) -> float:
    """Largest relative error between analytic and numeric gradients for one random case."""
    rng = np.random.default_rng(seed)
    attrs, xs64, wrt = make_case(op, rng)
    node = Node("n", op, tuple(f"x{i}" for i in range(len(xs64))), attrs)
    opdef = OPS[op]
    ctx = OpContext(lambda name: np.random.default_rng(0))
    xs32 = [x.astype(F32) for x in xs64]
    ys = opdef.forward(node, xs32, ctx)
    seed_grad = rng.normal(size=np.shape(ys[0]))
    gys = [seed_grad.astype(F32)] + [None] * (len(ys) - 1)
    analytic = opdef.backward(node, xs32, ys, gys)
    worst = 0.0
    for i in wrt:
        def f(xi, i=i):
            ins = list(xs64)
            ins[i] = xi
            y = opdef.forward(node, ins, ctx)[0]
            return float((np.asarray(y, np.float64) * seed_grad).sum())
        worst = max(worst, rel_error(analytic[i], numeric_grad(f, xs64[i], eps)))
    return worst
