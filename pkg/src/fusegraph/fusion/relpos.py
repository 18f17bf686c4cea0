"""Relative-position attention with its pad/reshape/slice shift -> FusedRelPosAttention.

The shift subgraph is recognized by the shapes it produces rather than by its
attribute spelling: (H, L, 2L-1) padded to (H, L, 2L), folded to (H, 2L, L),
first row dropped, unfolded to (H, L, 2L-1) and cut to the first L columns.
That sequence is exactly ``out[i, j] = bd[i, L-1+j-i]``, the skew the fused
kernel computes by index arithmetic.
"""

from __future__ import annotations

import numpy as np

from ..graph_ir import Node, OpKind
from .attention import (
    Heads,
    attention_tail,
    check_heads,
    check_mask,
    check_merge,
    check_projections,
    check_scale,
    head_split,
    packed_names,
    projection,
)
from .match import GraphView, Match, Mismatch, Rejected, fused_id, optional_mask
from .params import AttentionParams


def _shift(view: GraphView, value: str) -> tuple[list[Node], str]:
    keep = view.producer(value, OpKind.Slice)
    unfold = view.producer(keep.inputs[0], OpKind.Reshape)
    drop = view.producer(unfold.inputs[0], OpKind.Slice)
    fold = view.producer(drop.inputs[0], OpKind.Reshape)
    pad = view.producer(fold.inputs[0], OpKind.Pad)
    return [pad, fold, drop, unfold, keep], pad.inputs[0]


def _check_shift(view: GraphView, nodes: list[Node], heads: int, length) -> None:
    pad, fold, drop, unfold, keep = nodes
    if pad.attr("pads") != [0, 0, 1, 0, 0, 0] or float(pad.attr("value", 0.0)) != 0.0:
        raise Rejected(f"{pad.id} is not a single zero column on the left of the last axis")
    if drop.attr("axes") != [1] or drop.attr("starts") != [1]:
        raise Rejected(f"{drop.id} does not drop the first folded row")
    if keep.attr("axes") != [2] or keep.attr("starts") != [0]:
        raise Rejected(f"{keep.id} does not keep the leading columns")
    rows = length * 2 - 1
    expected = {
        fold.outputs[0]: (heads, length * 2, length),
        drop.outputs[0]: (heads, rows, length),
        unfold.outputs[0]: (heads, length, rows),
        keep.outputs[0]: (heads, length, length),
    }
    for value, want in expected.items():
        got = view.info(value).shape
        if got != want:
            raise Rejected(f"relative shift value {value} has shape {got}, expected {want}")


def _bias(view: GraphView, value: str, heads: int, dk: int, what: str) -> None:
    arr = view.initializer(value, what)
    if arr.shape != (heads, dk) or arr.dtype != np.float32:
        raise Rejected(f"{what} {value} is {arr.shape}, expected ({heads}, {dk})")


def match_relpos_attention(view: GraphView, softmax: Node) -> Match:
    if softmax.attr("axis") not in (-1, 2):
        raise Mismatch(softmax.id)
    scaled, mask, mask_node = optional_mask(view, softmax.inputs[0])
    div = view.producer(scaled, OpKind.Div)
    logits = view.producer(div.inputs[0], OpKind.Add)
    ac = view.producer(logits.inputs[0], OpKind.MatMul)
    shift, bd_value = _shift(view, logits.inputs[1])
    bd = view.producer(bd_value, OpKind.MatMul)

    qu_t = view.producer(ac.inputs[0], OpKind.Transpose, perm=[1, 0, 2])
    add_u = view.producer(qu_t.inputs[0], OpKind.Add)
    qv_t = view.producer(bd.inputs[0], OpKind.Transpose, perm=[1, 0, 2])
    add_v = view.producer(qv_t.inputs[0], OpKind.Add)
    if add_u.inputs[0] != add_v.inputs[0]:
        raise Mismatch(add_v.id)
    q_r = view.producer(add_u.inputs[0], OpKind.Reshape)
    kh = head_split(view, ac.inputs[1], [1, 2, 0])
    ph = head_split(view, bd.inputs[1], [1, 2, 0])
    tail = attention_tail(view, softmax)
    q_proj = projection(view, q_r.inputs[0])
    projs = [q_proj, projection(view, kh.source), projection(view, tail.v_heads.source)]
    p_proj = projection(view, ph.source, bias=False)

    d, (wq, wk, wv, bq, bk, bv) = check_projections(view, projs)
    length = view.info(q_proj.x).shape[0]
    rows = length * 2 - 1
    pos_emb = p_proj.x
    if view.info(pos_emb).shape != (rows, d):
        raise Rejected(f"positional table {pos_emb} has shape {view.info(pos_emb).shape}, expected ({rows}, {d})")
    w_pos = view.initializer(p_proj.weight, "positional projection")
    if w_pos.shape != (d, d) or w_pos.dtype != np.float32:
        raise Rejected(f"positional projection {p_proj.weight} is {w_pos.shape}, expected ({d}, {d})")
    q_heads = Heads([q_r], q_proj.x, q_r.outputs[0])
    heads, dk = check_heads(view, [q_heads, kh, tail.v_heads, ph], [length, length, length, rows], d)
    _bias(view, add_u.inputs[1], heads, dk, "content bias u")
    _bias(view, add_v.inputs[1], heads, dk, "position bias v")
    _check_shift(view, shift, heads, length)
    check_scale(view, div, dk)
    check_mask(view, mask, heads, length)
    check_merge(view, tail, length, d)

    matched = [n for p in projs + [p_proj] for n in p.nodes] + [q_r, add_u, qu_t, add_v, qv_t]
    matched += kh.nodes + ph.nodes + tail.v_heads.nodes + [ac, bd] + shift + [logits, div]
    matched += ([mask_node] if mask_node else []) + [softmax] + tail.nodes
    view.check_private(matched, tail.result)

    nid = fused_id(matched, "fused_relpos_attention")
    params = AttentionParams.pack(heads, wq, wk, wv, bq, bk, bv)
    w_name, b_name = packed_names(view, projs, nid)
    inputs = (q_proj.x, pos_emb, w_name, b_name, p_proj.weight, add_u.inputs[1], add_v.inputs[1])
    inputs += (mask,) if mask else ()
    node = Node(nid, OpKind.FusedRelPosAttention, inputs, (tail.result,), {"num_heads": heads})
    return Match(matched, node, {w_name: params.w_qkv, b_name: params.b_qkv})


ANCHOR = OpKind.Softmax
