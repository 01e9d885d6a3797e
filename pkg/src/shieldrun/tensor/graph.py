"""Dataflow graph: named nodes, explicit inputs, acyclic."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from ..errors import GraphInvalid, UnknownNode

OP_KINDS = (
    "const", "variable", "placeholder", "matmul", "add", "conv2d", "maxpool2x2", "relu",
    "softmax", "softmax_xent_loss", "sgd_apply", "reshape", "crop", "flip", "brightness",
    "saturation", "record_reader", "fifo_queue",
)


def split_ref(ref: str) -> tuple[str, int]:
    """``"node:1"`` -> ("node", 1); a bare name is output 0."""
    name, sep, idx = ref.rpartition(":")
    if sep and idx.isdigit():
        return name, int(idx)
    return ref, 0


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple[str, ...] = ()
    attrs: dict[str, Any] = field(default_factory=dict)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Node):
            return NotImplemented
        return (self.name, self.op, self.inputs) == (other.name, other.op, other.inputs) \
            and _attrs_equal(self.attrs, other.attrs)


def _attrs_equal(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    for k in a:
        x, y = a[k], b[k]
        if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            if not (isinstance(x, np.ndarray) and isinstance(y, np.ndarray)):
                return False
            if x.shape != y.shape or x.dtype != y.dtype or x.tobytes() != y.tobytes():
                return False
        elif x != y:
            return False
    return True


class Graph:
    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self.nodes: dict[str, Node] = {}
        self.finalized = False

    def add(self, name: str, op: str, inputs: Iterable[str] = (), **attrs: Any) -> str:
        if self.finalized:
            raise GraphInvalid("graph is finalized")
        if op not in OP_KINDS:
            raise GraphInvalid(f"unknown op kind {op!r}")
        if not name or ":" in name:
            raise GraphInvalid(f"bad node name {name!r}")
        if name in self.nodes:
            raise GraphInvalid(f"duplicate node name {name!r}")
        # tuples become lists so attrs survive a serialization roundtrip unchanged
        attrs = {k: list(v) if isinstance(v, tuple) else v for k, v in attrs.items()}
        self.nodes[name] = Node(name, op, tuple(inputs), attrs)
        return name

    def __getitem__(self, name: str) -> Node:
        try:
            return self.nodes[split_ref(name)[0]]
        except KeyError:
            raise UnknownNode(f"no node named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return split_ref(name)[0] in self.nodes

    def variables(self) -> list[Node]:
        return [n for n in self.nodes.values() if n.op == "variable"]

    def finalize(self) -> Graph:
        for n in self.nodes.values():
            for ref in n.inputs:
                if split_ref(ref)[0] not in self.nodes:
                    raise GraphInvalid(f"{n.name}: input {ref!r} does not resolve")
        self.order(self.nodes)  # raises on cycles
        self.finalized = True
        return self

    def order(self, targets: Iterable[str]) -> list[Node]:
        """Nodes needed for ``targets`` in dependency order.

        The order depends only on edges and target order, never on the
        order nodes were added.
        """
        out: list[Node] = []
        state: dict[str, int] = {}  # 1 visiting, 2 done
        for target in targets:
            root = self[target].name
            if state.get(root) == 2:
                continue
            stack = [(root, iter(self.nodes[root].inputs))]
            state[root] = 1
            while stack:
                name, it = stack[-1]
                for ref in it:
                    dep = split_ref(ref)[0]
                    if dep not in self.nodes:
                        raise UnknownNode(f"{name}: input {ref!r} does not resolve")
                    s = state.get(dep)
                    if s == 1:
                        raise GraphInvalid(f"cycle through {dep!r}")
                    if s is None:
                        state[dep] = 1
                        stack.append((dep, iter(self.nodes[dep].inputs)))
                        break
                else:
                    stack.pop()
                    state[name] = 2
                    out.append(self.nodes[name])
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return self.seed == other.seed and self.nodes == other.nodes
