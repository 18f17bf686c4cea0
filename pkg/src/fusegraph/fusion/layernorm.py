"""ReduceMean/Sub/Pow/ReduceMean/Add/Sqrt/Div/Mul/Add -> LayerNorm."""

from __future__ import annotations

from ..graph_ir import Node, OpKind
from .match import GraphView, Match, Mismatch, Rejected, fused_id


def _last_axis_mean(view: GraphView, node: Node, rank: int) -> None:
    axes = node.attr("axes")
    if axes not in ([-1], [rank - 1]) or node.attr("keepdims") != 1:
        raise Rejected(f"{node.id} reduces axes {axes} (keepdims={node.attr('keepdims')}), not the last axis")


def match_layer_norm(view: GraphView, sqrt: Node) -> Match:
    var_eps = view.producer(sqrt.inputs[0], OpKind.Add)
    var = view.producer(var_eps.inputs[0], OpKind.ReduceMean)
    sq = view.producer(var.inputs[0], OpKind.Pow)
    sub = view.producer(sq.inputs[0], OpKind.Sub)
    mean = view.producer(sub.inputs[1], OpKind.ReduceMean)
    x = sub.inputs[0]
    if mean.inputs[0] != x:
        raise Mismatch(x)
    div = view.sole_consumer(sqrt.outputs[0], OpKind.Div)
    if div.inputs != (sub.outputs[0], sqrt.outputs[0]):
        raise Mismatch(div.id)
    mul = view.sole_consumer(div.outputs[0], OpKind.Mul)
    add = view.sole_consumer(mul.outputs[0], OpKind.Add)
    if add.inputs[0] != mul.outputs[0]:
        raise Mismatch(add.id)

    exponent = view.inits.get(sq.inputs[1])
    if exponent is None or exponent.size != 1 or float(exponent.reshape(())) != 2.0:
        raise Rejected(f"{sq.id} is not a square (exponent must be the constant 2)")
    shape = view.info(x).shape
    for reduce in (mean, var):
        _last_axis_mean(view, reduce, len(shape))
    eps = view.scalar(var_eps.inputs[1], "eps")
    d = shape[-1]
    gamma = view.initializer(mul.inputs[1], "gamma")
    beta = view.initializer(add.inputs[1], "beta")
    for name, arr in (("gamma", gamma), ("beta", beta)):
        if arr.shape != (d,) or arr.dtype.kind != "f":
            raise Rejected(f"{name} has shape {arr.shape}, expected ({d},)")
    matched = [mean, sub, sq, var, var_eps, sqrt, div, mul, add]
    view.check_private(matched, add.outputs[0])
    node = Node(
        fused_id(matched, "layer_norm"),
        OpKind.LayerNorm,
        (x, mul.inputs[1], add.inputs[1]),
        add.outputs,
        {"eps": eps},
    )
    return Match(matched, node)


ANCHOR = OpKind.Sqrt
