"""Anchored exact-structure matching over a canonicalized graph."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..graph_ir import Graph, Node, OpKind, infer_shapes
from ..graph_ir.ir import ValueInfo

_COMMUTATIVE = (OpKind.Add, OpKind.Mul)


class Mismatch(Exception):
    """The candidate does not have the pattern's structure; skipped silently."""


class Rejected(Exception):
    """The structure matched but a semantic check failed; reported as a diagnostic."""


def canonicalize(g: Graph) -> Graph:
    """Put the initializer operand of Add/Mul second. Returns ``g`` itself if nothing moves."""
    inits = g.initializers
    changed = False
    nodes = []
    for n in g.nodes:
        if n.kind in _COMMUTATIVE and n.inputs[0] in inits and n.inputs[1] not in inits:
            n = Node(n.id, n.kind, (n.inputs[1], n.inputs[0]), n.outputs, n.attrs)
            changed = True
        nodes.append(n)
    return g.copy(nodes=nodes) if changed else g


class GraphView:
    """Read-only lookup tables used while matching."""

    def __init__(self, g: Graph):
        self.graph = infer_shapes(g)
        self.inits = g.initializers
        self.producers = g.producers()
        self.consumers = g.consumers()
        self.outputs = set(g.outputs)
        # names new initializers must avoid, grown as matches claim names
        self.taken = set(g.initializers) | set(self.producers) | set(g.input_names())

    def info(self, value: str) -> ValueInfo:
        return self.graph.value_info[value]

    def producer(self, value: str, kind: OpKind, **attrs) -> Node:
        node = self.producers.get(value)
        if node is None or node.kind is not kind:
            raise Mismatch(value)
        for key, want in attrs.items():
            if node.attr(key) != want:
                raise Mismatch(value)
        return node

    def sole_consumer(self, value: str, kind: OpKind) -> Node:
        users = self.consumers.get(value, [])
        if len(users) != 1 or users[0].kind is not kind:
            raise Mismatch(value)
        return users[0]

    def initializer(self, value: str, what: str) -> np.ndarray:
        arr = self.inits.get(value)
        if not isinstance(arr, np.ndarray):
            raise Rejected(f"{what} {value} is not a constant initializer")
        return arr

    def scalar(self, value: str, what: str) -> float:
        arr = self.initializer(value, what)
        if arr.size != 1 or arr.dtype != np.float32:
            raise Rejected(f"{what} {value} is not an F32 scalar")
        return float(arr.reshape(()))

    def check_private(self, matched: list[Node], result: str) -> None:
        """Every value produced inside the match, except ``result``, must stay inside it."""
        ids = {n.id for n in matched}
        for n in matched:
            for out in n.outputs:
                if out == result:
                    continue
                if out in self.outputs:
                    raise Rejected(f"intermediate value {out} is a graph output")
                outside = [c.id for c in self.consumers.get(out, []) if c.id not in ids]
                if outside:
                    raise Rejected(f"intermediate value {out} is also read by {', '.join(outside)}")


@dataclass
class Match:
    nodes: list[Node]
    node: Node  # replacement
    new_initializers: dict[str, np.ndarray] = field(default_factory=dict)

    def describe(self) -> dict:
        return {
            "node": self.node.id,
            "replaced": sorted(n.id for n in self.nodes),
            "inputs": list(self.node.inputs),
            "outputs": list(self.node.outputs),
        }


Matcher = Callable[[GraphView, Node], Match]


def fresh_name(base: str, taken: set[str]) -> str:
    name, i = base, 1
    while name in taken:
        i += 1
        name = f"{base}.{i}"
    taken.add(name)
    return name


def weight_prefix(names: list[str], fallback: str) -> str:
    """Longest shared dotted prefix of ``names``, e.g. ``enc.blk0.attn``."""
    common = os.path.commonprefix([n.split(".") for n in names])
    return ".".join(common) if common else fallback


def find_matches(view: GraphView, anchor: OpKind, matcher: Matcher) -> tuple[list[Match], list[str]]:
    matches: list[Match] = []
    diagnostics: list[str] = []
    claimed: set[str] = set()
    for node in view.graph.nodes:
        if node.kind is not anchor:
            continue
        try:
            m = matcher(view, node)
        except Mismatch:
            continue
        except Rejected as exc:
            diagnostics.append(f"near {node.id}: {exc}; not fused")
            continue
        ids = {n.id for n in m.nodes}
        if ids & claimed:
            diagnostics.append(f"near {node.id}: overlaps an earlier match; not fused")
            continue
        claimed |= ids
        matches.append(m)
    return matches, diagnostics


def rewrite(g: Graph, matches: list[Match]) -> Graph:
    """Drop matched nodes and put each replacement where its match's last node was.

    Initializers read only by dropped nodes go away; everything else keeps its bytes.
    """
    if not matches:
        return g
    last_of: dict[str, Node] = {}
    removed: set[str] = set()
    for m in matches:
        ids = {n.id for n in m.nodes}
        removed |= ids
        position = max(i for i, n in enumerate(g.nodes) if n.id in ids)
        last_of[g.nodes[position].id] = m.node
    nodes = []
    for n in g.nodes:
        if n.id in last_of:
            nodes.append(last_of[n.id])
        elif n.id not in removed:
            nodes.append(n)
    inits = dict(g.initializers)
    for m in matches:
        inits.update(m.new_initializers)
    dropped = {i for m in matches for n in m.nodes for i in n.inputs} - {i for n in nodes for i in n.inputs}
    inits = {k: v for k, v in inits.items() if k not in dropped}
    return Graph(g.name, list(g.inputs), list(g.outputs), nodes, inits)


def fused_id(nodes: list[Node], suffix: str) -> str:
    # min id keeps the fused node where the pattern started in id-ordered schedules
    return f"{min(n.id for n in nodes)}.{suffix}"


def optional_mask(view: GraphView, value: str) -> tuple[str, Optional[str], Optional[Node]]:
    """If ``value`` is Add(scores, mask) with scores from a Div, peel the mask off."""
    node = view.producers.get(value)
    if node is not None and node.kind is OpKind.Add:
        lhs = view.producers.get(node.inputs[0])
        if lhs is not None and lhs.kind is OpKind.Div:
            return node.inputs[0], node.inputs[1], node
    return value, None, None
