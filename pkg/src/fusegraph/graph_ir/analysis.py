"""Graph validation, deterministic topological ordering and shape inference."""

from __future__ import annotations

import heapq

from ..errors import ConfigError, ShapeError, ValidationError
from ..qtensor import QuantTensor
from ..tensor import DType
from .ir import SCHEMAS, Graph, Node, ValueInfo
from .shapes import RULES, fmt


def initializer_info(name: str, value) -> ValueInfo:
    if isinstance(value, QuantTensor):
        return ValueInfo(name, DType.I8, tuple(value.shape))
    return ValueInfo(name, DType.of(value), tuple(value.shape))


def _structural_diagnostics(g: Graph) -> list[str]:
    diags: list[str] = []
    seen_ids: set[str] = set()
    defined: dict[str, str] = {}

    def define(name: str, where: str) -> None:
        if name in defined:
            diags.append(f"value {name} defined twice ({defined[name]} and {where})")
        else:
            defined[name] = where

    for v in g.inputs:
        define(v.name, "graph input")
    for name in g.initializers:
        define(name, "initializer")
    for node in g.nodes:
        if node.id in seen_ids:
            diags.append(f"duplicate node id {node.id}")
        seen_ids.add(node.id)
        for out in node.outputs:
            define(out, f"node {node.id}")

        schema = SCHEMAS[node.kind]
        if not schema.min_inputs <= len(node.inputs) <= schema.max_inputs:
            diags.append(
                f"node {node.id} ({node.kind.value}) takes {schema.min_inputs}..{schema.max_inputs} "
                f"inputs, got {len(node.inputs)}"
            )
        if schema.outputs is not None and len(node.outputs) != schema.outputs:
            diags.append(f"node {node.id} ({node.kind.value}) must have {schema.outputs} output(s)")
        if not node.outputs:
            diags.append(f"node {node.id} has no outputs")
        missing = [a for a in schema.required_attrs if a not in node.attrs]
        if missing:
            diags.append(f"node {node.id} ({node.kind.value}) missing attribute(s) {', '.join(missing)}")

    for node in g.nodes:
        for name in node.inputs:
            if name not in defined:
                diags.append(f"unresolved value {name} (input of node {node.id})")
    for name in g.outputs:
        if name not in defined:
            diags.append(f"unresolved value {name} (graph output)")
    return diags


def _find_cycle(blocked: list[Node], producers: dict[str, Node]) -> list[str]:
    """Walk producer links among nodes that never became ready until one repeats."""
    blocked_ids = {n.id for n in blocked}
    by_id = {n.id: n for n in blocked}
    start = min(blocked_ids)
    path: list[str] = []
    index: dict[str, int] = {}
    current = start
    while current not in index:
        index[current] = len(path)
        path.append(current)
        node = by_id[current]
        nxt = sorted(
            producers[i].id for i in node.inputs if i in producers and producers[i].id in blocked_ids
        )
        if not nxt:
            return sorted(blocked_ids)
        current = nxt[0]
    return path[index[current]:]


def _kahn(g: Graph) -> tuple[list[Node], list[Node]]:
    producers = g.producers()
    available = {v.name for v in g.inputs} | set(g.initializers)
    waiting: dict[str, set[str]] = {}
    dependents: dict[str, list[Node]] = {}
    ready: list[tuple[str, int]] = []
    for pos, node in enumerate(g.nodes):
        deps = {producers[i].id for i in node.inputs if i not in available and i in producers}
        waiting[node.id] = deps
        for d in deps:
            dependents.setdefault(d, []).append(node)
        if not deps:
            heapq.heappush(ready, (node.id, pos))
    positions = {n.id: i for i, n in enumerate(g.nodes)}
    order: list[Node] = []
    while ready:
        nid, pos = heapq.heappop(ready)
        node = g.nodes[pos]
        order.append(node)
        for dep in dependents.get(nid, ()):
            pending = waiting[dep.id]
            pending.discard(nid)
            if not pending:
                heapq.heappush(ready, (dep.id, positions[dep.id]))
    done = {n.id for n in order}
    return order, [n for n in g.nodes if n.id not in done]


def topo_order(g: Graph) -> list[Node]:
    """Producers before consumers; among ready nodes, lexicographically smallest id first."""
    order, blocked = _kahn(g)
    if blocked:
        cycle = _find_cycle(blocked, g.producers())
        raise ValidationError([f"cycle through {', '.join(cycle)}"])
    return order


def _infer(g: Graph) -> tuple[dict[str, ValueInfo], list[str]]:
    infos: dict[str, ValueInfo] = {v.name: v for v in g.inputs}
    for name, value in g.initializers.items():
        infos[name] = initializer_info(name, value)
    errors: list[str] = []
    for node in topo_order(g):
        if any(i not in infos for i in node.inputs):
            continue  # upstream failure already reported
        specs = [(infos[i].dtype, infos[i].shape) for i in node.inputs]
        try:
            results = RULES[node.kind](node, specs)
        except (ShapeError, ConfigError, TypeError, ValueError) as exc:
            shapes = ", ".join(fmt(s) for _, s in specs)
            errors.append(f"shape error at node {node.id} ({node.kind.value}) with inputs {shapes}: {exc}")
            continue
        for out, (dtype, shape) in zip(node.outputs, results):
            infos[out] = ValueInfo(out, dtype, tuple(shape))
    return infos, errors


def validate(g: Graph) -> list[str]:
    """Return every diagnostic found; an empty list means the graph is valid."""
    diags = _structural_diagnostics(g)
    _, blocked = _kahn(g)
    if blocked:
        diags.append(f"cycle through {', '.join(_find_cycle(blocked, g.producers()))}")
    if diags:
        return diags
    _, errors = _infer(g)
    return errors


def check(g: Graph) -> Graph:
    diags = validate(g)
    if diags:
        raise ValidationError(diags)
    return g


def infer_shapes(g: Graph) -> Graph:
    """Return a copy of ``g`` with ``value_info`` populated for every value."""
    check(g)
    infos, errors = _infer(g)
    if errors:
        raise ShapeError("; ".join(errors))
    return g.copy(value_info=infos)
