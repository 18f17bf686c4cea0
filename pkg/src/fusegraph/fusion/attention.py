"""Three projections + scaled dot-product + head split/merge -> FusedAttention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ShapeError
from ..graph_ir import Node, OpKind
from ..graph_ir.shapes import broadcast
from .match import GraphView, Match, Mismatch, Rejected, fresh_name, fused_id, optional_mask, weight_prefix
from .params import AttentionParams


@dataclass
class Projection:
    nodes: list[Node]
    x: str
    weight: str
    bias: Optional[str]


def projection(view: GraphView, value: str, bias: bool = True) -> Projection:
    if bias:
        add = view.producer(value, OpKind.Add)
        mm = view.producer(add.inputs[0], OpKind.MatMul)
        return Projection([mm, add], mm.inputs[0], mm.inputs[1], add.inputs[1])
    mm = view.producer(value, OpKind.MatMul)
    return Projection([mm], mm.inputs[0], mm.inputs[1], None)


@dataclass
class Heads:
    nodes: list[Node]
    source: str
    reshaped: str


def head_split(view: GraphView, value: str, perm: list[int]) -> Heads:
    t = view.producer(value, OpKind.Transpose, perm=perm)
    r = view.producer(t.inputs[0], OpKind.Reshape)
    return Heads([r, t], r.inputs[0], r.outputs[0])


@dataclass
class Tail:
    nodes: list[Node]
    v_heads: Heads
    result: str


def attention_tail(view: GraphView, softmax: Node) -> Tail:
    """Softmax -> MatMul with V heads -> merge transpose -> merge reshape."""
    ctx = view.sole_consumer(softmax.outputs[0], OpKind.MatMul)
    if ctx.inputs[0] != softmax.outputs[0]:
        raise Mismatch(ctx.id)
    vh = head_split(view, ctx.inputs[1], [1, 0, 2])
    mt = view.sole_consumer(ctx.outputs[0], OpKind.Transpose)
    if mt.attr("perm") != [1, 0, 2]:
        raise Mismatch(mt.id)
    mr = view.sole_consumer(mt.outputs[0], OpKind.Reshape)
    return Tail([ctx, mt, mr], vh, mr.outputs[0])


def check_projections(view: GraphView, projs: list[Projection]) -> tuple[int, list[np.ndarray]]:
    """All projections read the same (L, D) input through (D, D) float weights; returns D and arrays."""
    sources = {p.x for p in projs}
    if len(sources) != 1:
        raise Rejected(f"projections read different inputs ({', '.join(sorted(sources))})")
    shape = view.info(projs[0].x).shape
    if len(shape) != 2 or not isinstance(shape[1], int):
        raise Rejected(f"attention input has shape {shape}, expected (L, D)")
    d = shape[1]
    arrays = []
    for p in projs:
        w = view.initializer(p.weight, "projection weight")
        if w.shape != (d, d) or w.dtype != np.float32:
            raise Rejected(f"projection weight {p.weight} is {w.shape}, expected ({d}, {d}) F32")
        arrays.append(w)
    for p in projs:
        if p.bias is None:
            continue
        b = view.initializer(p.bias, "projection bias")
        if b.shape != (d,) or b.dtype != np.float32:
            raise Rejected(f"projection bias {p.bias} is {b.shape}, expected ({d},) F32")
        arrays.append(b)
    return d, arrays


def check_heads(view: GraphView, heads: list[Heads], lengths: list, d: int) -> tuple[int, int]:
    """Each reshape splits (len, D) into (len, H, d_k) with one shared H."""
    found = set()
    for h, length in zip(heads, lengths):
        shape = view.info(h.reshaped).shape
        if len(shape) != 3 or shape[0] != length or shape[1] * shape[2] != d:
            raise Rejected(f"head split {h.reshaped} has shape {shape}, expected ({length}, H, {d}/H)")
        found.add((shape[1], shape[2]))
    if len(found) != 1:
        raise Rejected(f"head layouts disagree: {sorted(found)}")
    return found.pop()


def check_scale(view: GraphView, div: Node, dk: int) -> None:
    c = view.scalar(div.inputs[1], "scale divisor")
    if not math.isclose(c, math.sqrt(dk), rel_tol=1e-6):
        raise Rejected(f"scores are divided by {c}, not sqrt(d_k) = {math.sqrt(dk):g}")


def check_mask(view: GraphView, mask: Optional[str], heads: int, length) -> None:
    if mask is None:
        return
    shape = view.info(mask).shape
    try:
        broadcast(shape, (heads, length, length))
    except ShapeError:
        raise Rejected(f"mask {mask} of shape {shape} does not broadcast to (H, L, L)") from None


def check_merge(view: GraphView, tail: Tail, length, d: int) -> None:
    shape = view.info(tail.result).shape
    if shape != (length, d):
        raise Rejected(f"head merge yields {shape}, expected ({length}, {d})")


def packed_names(view: GraphView, projs: list[Projection], fallback: str) -> tuple[str, str]:
    prefix = weight_prefix([p.weight for p in projs], fallback)
    return fresh_name(f"{prefix}.qkv.weight", view.taken), fresh_name(f"{prefix}.qkv.bias", view.taken)


def match_attention(view: GraphView, softmax: Node) -> Match:
    if softmax.attr("axis") not in (-1, 2):
        raise Mismatch(softmax.id)
    scaled, mask, mask_node = optional_mask(view, softmax.inputs[0])
    div = view.producer(scaled, OpKind.Div)
    scores = view.producer(div.inputs[0], OpKind.MatMul)
    qh = head_split(view, scores.inputs[0], [1, 0, 2])
    kh = head_split(view, scores.inputs[1], [1, 2, 0])
    tail = attention_tail(view, softmax)
    projs = [projection(view, h.source) for h in (qh, kh, tail.v_heads)]

    d, (wq, wk, wv, bq, bk, bv) = check_projections(view, projs)
    length = view.info(projs[0].x).shape[0]
    heads, dk = check_heads(view, [qh, kh, tail.v_heads], [length] * 3, d)
    check_scale(view, div, dk)
    check_mask(view, mask, heads, length)
    check_merge(view, tail, length, d)

    matched = [n for p in projs for n in p.nodes] + qh.nodes + kh.nodes + tail.v_heads.nodes
    matched += [scores, div] + ([mask_node] if mask_node else []) + [softmax] + tail.nodes
    view.check_private(matched, tail.result)

    nid = fused_id(matched, "fused_attention")
    params = AttentionParams.pack(heads, wq, wk, wv, bq, bk, bv)
    w_name, b_name = packed_names(view, projs, nid)
    inputs = (projs[0].x, w_name, b_name) + ((mask,) if mask else ())
    node = Node(nid, OpKind.FusedAttention, inputs, (tail.result,), {"num_heads": heads})
    return Match(matched, node, {w_name: params.w_qkv, b_name: params.b_qkv})


ANCHOR = OpKind.Softmax
