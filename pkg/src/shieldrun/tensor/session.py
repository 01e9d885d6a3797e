"""Graph execution: forward evaluation, backprop, SGD and cost accounting."""

from __future__ import annotations

import zlib
from typing import Any, Iterable, Mapping

import numpy as np

from .. import scheduler as sched_mod
from ..errors import GraphInvalid, NonFinite, ShapeMismatch, UnknownNode
from .graph import Graph, Node, split_ref
from .ops import BACKWARD_FACTOR, F32, OPS, OpContext, f32
from .pipeline import FifoQueue, RecordSource

Ref = tuple[str, int]
_ARENA_BLOCK = 16 << 20
SCRATCH_PANEL = 1 << 20


def _ref(r: str) -> Ref:
    return split_ref(r)


def _check_finite(node: Node, arrays: Iterable[np.ndarray], what: str = "output") -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFinite(f"{node.name}: non-finite {what}")


class _Arena:
    """Per-thread bump region for activations; rewound at the start of each run."""

    def __init__(self, runtime: Any) -> None:
        self.runtime = runtime
        self.blocks: list[tuple[int, int]] = []
        self.block = 0
        self.offset = 0

    def reset(self) -> None:
        self.block = 0
        self.offset = 0

    def alloc(self, nbytes: int) -> int:
        nbytes = -(-nbytes // 64) * 64
        while True:
            if self.block == len(self.blocks):
                size = max(_ARENA_BLOCK, nbytes)
                self.blocks.append((self.runtime.alloc(size), size))
            base, size = self.blocks[self.block]
            if self.offset + nbytes <= size:
                addr = base + self.offset
                self.offset += nbytes
                return addr
            self.block += 1
            self.offset = 0


def truncated_normal(rng: np.random.Generator, shape, stddev: float) -> np.ndarray:
    out = rng.normal(0.0, stddev, size=shape)
    bad = np.abs(out) > 2 * stddev
    while bad.any():
        out[bad] = rng.normal(0.0, stddev, size=int(bad.sum()))
        bad = np.abs(out) > 2 * stddev
    return out.astype(F32)


def initial_value(graph: Graph, node: Node) -> np.ndarray:
    """Value a variable takes when its initializer runs."""
    if "value" in node.attrs:
        return f32(node.attrs["value"]).copy()
    shape = tuple(node.attrs["shape"])
    init = node.attrs.get("init", "zeros")
    if init == "zeros":
        return np.zeros(shape, dtype=F32)
    if init == "truncated_normal":
        rng = np.random.default_rng([graph.seed, zlib.crc32(node.name.encode())])
        return truncated_normal(rng, shape, float(node.attrs.get("stddev", 0.05)))
    raise GraphInvalid(f"{node.name}: unknown initializer {init!r}")


class Session:
    """Runs a finalized graph, optionally charging a runtime's cost model.

    ``runtime`` needs ``alloc``, ``mem_access`` and ``charge_compute``
    (an :class:`~shieldrun.enclave.Enclave` fits).
    """

    def __init__(self, graph: Graph, runtime: Any = None, seed: int | None = None,
                 yield_between_ops: bool = True) -> None:
        if not graph.finalized:
            graph.finalize()
        self.graph = graph
        self.runtime = runtime
        self.seed = graph.seed if seed is None else seed
        self.yield_between_ops = yield_between_ops
        self.values: dict[str, np.ndarray] = {}
        self.sources: dict[str, RecordSource] = {}
        self.queues: dict[str, FifoQueue] = {}
        self._rngs: dict[str, np.random.Generator] = {}
        self._var_addr: dict[str, int] = {}
        self._arenas: dict[Any, _Arena] = {}
        self._ctx = OpContext(self._rng)

    # -- state ---------------------------------------------------------------

    def _rng(self, name: str) -> np.random.Generator:
        g = self._rngs.get(name)
        if g is None:
            g = self._rngs[name] = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
        return g

    def initialize(self, overwrite: bool = False) -> None:
        """Run every variable initializer (folded values count as initializers)."""
        for node in self.graph.variables():
            if overwrite or node.name not in self.values:
                self.assign(node.name, initial_value(self.graph, node))

    def assign(self, name: str, value: np.ndarray) -> None:
        node = self.graph[name]
        if node.op != "variable":
            raise GraphInvalid(f"{name} is not a variable")
        value = f32(value)
        if "shape" in node.attrs and tuple(node.attrs["shape"]) != value.shape:
            raise ShapeMismatch(f"{name}: expected {tuple(node.attrs['shape'])}, got {value.shape}")
        self.values[name] = value.copy()
        if self.runtime is not None and name not in self._var_addr:
            self._var_addr[name] = self.runtime.alloc(value.nbytes)
        self._touch(self._var_addr.get(name), value.nbytes, "write")

    def checkpoint(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in sorted(self.values.items())}

    def restore(self, values: Mapping[str, np.ndarray]) -> None:
        for name, v in values.items():
            self.assign(name, v)

    def bind_reader(self, node: str, source: RecordSource) -> None:
        if self.graph[node].op != "record_reader":
            raise GraphInvalid(f"{node} is not a record_reader")
        self.sources[self.graph[node].name] = source

    def queue(self, node: str) -> FifoQueue:
        n = self.graph[node]
        if n.op != "fifo_queue":
            raise GraphInvalid(f"{node} is not a fifo_queue")
        qname = n.attrs.get("queue", n.name)
        q = self.queues.get(qname)
        if q is None:
            cap = int(self.graph[qname].attrs.get("capacity", 512))
            q = self.queues[qname] = FifoQueue(cap)
        return q

    # -- cost accounting -----------------------------------------------------

    def _arena(self, key: Any) -> _Arena | None:
        if self.runtime is None:
            return None
        a = self._arenas.get(key)
        if a is None:
            a = self._arenas[key] = _Arena(self.runtime)
        return a

    def _touch(self, addr: int | None, nbytes: int, kind: str = "read") -> None:
        if addr is not None and self.runtime is not None and nbytes:
            self.runtime.mem_access(addr, nbytes, kind)

    def _place(self, arena: _Arena | None, arr: np.ndarray) -> int | None:
        if arena is None:
            return None
        addr = arena.alloc(arr.nbytes)
        self._touch(addr, arr.nbytes, "write")
        return addr

    def _scratch(self, arena: _Arena | None, nbytes: int) -> None:
        """Patch-matrix packing: one panel buffer, refilled until ``nbytes`` went through it."""
        if arena is None or nbytes <= 0:
            return
        panel = min(nbytes, SCRATCH_PANEL)
        addr = arena.alloc(panel)
        for _ in range(-(-nbytes // panel)):
            self._touch(addr, panel, "write")
            self._touch(addr, panel, "read")

    def _charge(self, flops: float) -> None:
        if self.runtime is not None and flops:
            self.runtime.charge_compute(flops)

    @staticmethod
    def _default_arena_key() -> Any:
        s = sched_mod.current()
        t = s.current_thread() if s is not None else None
        return t.tid if t is not None else 0

    def _maybe_yield(self) -> None:
        if self.yield_between_ops and sched_mod.in_green_thread():
            sched_mod.current().yield_now()

    # -- evaluation ----------------------------------------------------------

    def _forward(self, targets: list[str], feeds: Mapping[str, Any], arena_key: Any,
                 ) -> tuple[dict[Ref, np.ndarray], dict[Ref, int | None], list[Node]]:
        feed_vals = {}
        for k, v in feeds.items():
            if k not in self.graph:
                raise UnknownNode(f"feed for unknown node {k!r}")
            feed_vals[self.graph[k].name] = f32(v)
        arena = self._arena(arena_key)
        if arena is not None:
            arena.reset()
        order = self.graph.order(targets)
        vals: dict[Ref, np.ndarray] = {}
        addrs: dict[Ref, int | None] = {}
        for node in order:
            if node.name in feed_vals:
                outs = (self._check_placeholder(node, feed_vals[node.name]),)
                for i, o in enumerate(outs):
                    vals[node.name, i] = o
                    addrs[node.name, i] = self._place(arena, o)
                continue
            ins = []
            for r in node.inputs:
                ref = _ref(r)
                if ref not in vals:
                    raise UnknownNode(f"{node.name}: input {r!r} has no output {ref[1]}")
                ins.append(vals[ref])
                self._touch(addrs.get(ref), vals[ref].nbytes, "read")
            outs = self._eval(node, ins, vals, addrs, arena)
            if outs is None:
                continue
            _check_finite(node, outs)
            for i, o in enumerate(outs):
                vals[node.name, i] = o
                if (node.name, i) not in addrs:
                    addrs[node.name, i] = self._place(arena, o)
            self._maybe_yield()
        return vals, addrs, order

    def _check_placeholder(self, node: Node, v: np.ndarray) -> np.ndarray:
        shape = node.attrs.get("shape") if node.op == "placeholder" else None
        if shape is not None:
            if len(shape) != v.ndim or any(d is not None and d != s for d, s in zip(shape, v.shape)):
                raise ShapeMismatch(f"{node.name}: fed {v.shape}, expected {tuple(shape)}")
        _check_finite(node, (v,), "feed")
        return v

    def _eval(self, node: Node, ins: list[np.ndarray], vals, addrs, arena) -> tuple | None:
        op = node.op
        if op == "placeholder":
            raise ShapeMismatch(f"placeholder {node.name!r} was not fed")
        if op == "const":
            return (f32(node.attrs["value"]),)
        if op == "variable":
            if node.name not in self.values:
                raise GraphInvalid(f"variable {node.name!r} is not initialized")
            v = self.values[node.name]
            addrs[node.name, 0] = self._var_addr.get(node.name)
            self._touch(addrs[node.name, 0], v.nbytes, "read")
            return (v,)
        if op == "record_reader":
            src = self.sources.get(node.name)
            if src is None:
                raise GraphInvalid(f"record_reader {node.name!r} has no bound source")
            label, image = src.next()
            return (f32(label), image)
        if op == "fifo_queue":
            return self._eval_queue(node, ins)
        if op == "sgd_apply":
            # forward value is the loss; the update happens after the pass
            return (ins[0],)
        d = OPS[op]
        outs = d.forward(node, ins, self._ctx)
        self._charge(d.flops(node, ins, outs))
        if op == "conv2d":
            x, k = ins
            self._scratch(arena, x.shape[0] * x.shape[1] * x.shape[2] * k.shape[0] * k.shape[1] * k.shape[2] * 4)
        return outs

    def _eval_queue(self, node: Node, ins: list[np.ndarray]) -> tuple:
        role = node.attrs.get("role", "queue")
        q = self.queue(node.name)
        if role == "queue":
            return (f32(len(q)),)
        if role == "enqueue":
            q.enqueue(tuple(a.copy() for a in ins))
            return (f32(len(q)),)
        if role == "dequeue":
            n = int(node.attrs.get("batch", 1))
            items = q.dequeue_many(n)
            return tuple(np.stack([it[i] for it in items]) for i in range(len(items[0])))
        raise GraphInvalid(f"{node.name}: unknown queue role {role!r}")

    def run(self, fetches: str | list[str], feeds: Mapping[str, Any] | None = None,
            arena_key: Any = None) -> Any:
        """Evaluate ``fetches``; a single name returns one array, a list returns a list."""
        single = isinstance(fetches, str)
        names = [fetches] if single else list(fetches)
        key = self._default_arena_key() if arena_key is None else arena_key
        vals, addrs, order = self._forward(names, feeds or {}, key)
        for node in order:
            if node.op == "sgd_apply" and node.name not in (feeds or {}):
                grads = self._backward(node.inputs[0], vals, addrs, order, key)
                self.apply_gradients(grads, float(node.attrs.get("lr", 0.1)))
        out = [vals[_ref(n)] for n in names]
        return out[0] if single else out

    def gradients(self, loss: str, feeds: Mapping[str, Any] | None = None,
                  arena_key: Any = None, extra: list[str] = ()
                  ) -> tuple[np.ndarray, dict[str, np.ndarray]] | tuple[np.ndarray, dict, list]:
        """Loss value and d loss / d variable for every variable reached.

        Names in ``extra`` are evaluated in the same forward pass and
        returned as a third element.
        """
        key = self._default_arena_key() if arena_key is None else arena_key
        vals, addrs, order = self._forward([loss, *extra], feeds or {}, key)
        grads = self._backward(loss, vals, addrs, order, key)
        if extra:
            return vals[_ref(loss)], grads, [vals[_ref(e)] for e in extra]
        return vals[_ref(loss)], grads

    def input_gradients(self, output: str, wrt: list[str], feeds: Mapping[str, Any],
                        seed_grad: np.ndarray | None = None) -> list[np.ndarray]:
        """Gradients of sum(seed_grad * output) with respect to fed nodes."""
        vals, addrs, order = self._forward([output], feeds, 0)
        grads = self._backprop(output, vals, order, None, seed_grad)
        return [grads.get(_ref(w), np.zeros_like(vals[_ref(w)])) for w in wrt]

    def _backward(self, loss: str, vals, addrs, order, key) -> dict[str, np.ndarray]:
        grads = self._backprop(loss, vals, order, self._arena(key), addrs=addrs)
        return {n.name: grads[n.name, 0] for n in order
                if n.op == "variable" and (n.name, 0) in grads}

    def _backprop(self, target: str, vals, order: list[Node], arena,
                  seed_grad: np.ndarray | None = None, addrs=None) -> dict[Ref, np.ndarray]:
        t = _ref(target)
        y = vals[t]
        addrs = addrs or {}
        grads: dict[Ref, np.ndarray] = {t: np.ones_like(y) if seed_grad is None else f32(seed_grad)}
        gaddr: dict[Ref, int | None] = {}
        for node in reversed(order):
            if node.op in ("sgd_apply",):
                g = grads.get((node.name, 0))
                if g is not None:
                    _accumulate(grads, _ref(node.inputs[0]), g)
                continue
            d = OPS.get(node.op)
            if d is None or d.backward is None:
                continue
            nout = 1
            while (node.name, nout) in vals:
                nout += 1
            gys = [grads.get((node.name, i)) for i in range(nout)]
            if gys[0] is None:
                continue
            gys = [g if g is not None else np.zeros_like(vals[node.name, i]) for i, g in enumerate(gys)]
            xs = [vals[_ref(r)] for r in node.inputs]
            ys = [vals[node.name, i] for i in range(nout)]
            for i, g in enumerate(gys):
                self._touch(gaddr.get((node.name, i)), g.nbytes, "read")
            for r, x in zip(node.inputs, xs):
                self._touch(addrs.get(_ref(r)), x.nbytes, "read")
            gxs = d.backward(node, xs, ys, gys)
            self._charge(BACKWARD_FACTOR * d.flops(node, xs, ys))
            if node.op == "conv2d" and arena is not None:
                x, k = xs
                self._scratch(arena, 2 * x.shape[0] * x.shape[1] * x.shape[2] * k.shape[0] * k.shape[1] * k.shape[2] * 4)
            for r, gx in zip(node.inputs, gxs):
                if gx is None:
                    continue
                gx = f32(gx)
                _check_finite(node, (gx,), "gradient")
                ref = _ref(r)
                if ref in grads:
                    # accumulate into the existing gradient buffer
                    self._touch(gaddr.get(ref), gx.nbytes, "read")
                    self._touch(gaddr.get(ref), gx.nbytes, "write")
                else:
                    gaddr[ref] = self._place(arena, gx)
                _accumulate(grads, ref, gx)
            self._maybe_yield()
        return grads

    def apply_gradients(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        """theta <- theta - lr * grad, in sorted variable order."""
        lr32 = F32(lr)
        for name in sorted(grads):
            v = self.values[name]
            new = v - lr32 * grads[name]
            if not np.all(np.isfinite(new)):
                raise NonFinite(f"{name}: update produced non-finite values")
            self._charge(2 * v.size)
            addr = self._var_addr.get(name)
            self._touch(addr, v.nbytes, "read")
            self._touch(addr, v.nbytes, "write")
            self.values[name] = new


def _accumulate(grads: dict[Ref, np.ndarray], ref: Ref, g: np.ndarray) -> None:
    prev = grads.get(ref)
    grads[ref] = g if prev is None else prev + g
