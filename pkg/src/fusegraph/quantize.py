"""Dynamic 8-bit quantization of a graph's matrix products.

Weights are quantized once here; activations are quantized per call inside
the kernels. Biases, convolutions and embedding tables stay in float.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph_ir import Graph, Node, OpKind, check
from .qtensor import (
    ACT_QMAX,
    ACT_QMIN,
    QUANT_PARAMS_BYTES,
    WEIGHT_QMAX,
    WEIGHT_QMIN,
    QuantParams,
    QuantTensor,
    dequantize,
    dynamic_qparams,
    integer_matmul,
    quantize,
    quantize_weight,
    quantized_linear,
    weight_qparams,
)

__all__ = [
    "ACT_QMAX",
    "ACT_QMIN",
    "QUANT_PARAMS_BYTES",
    "WEIGHT_QMAX",
    "WEIGHT_QMIN",
    "QuantParams",
    "QuantTensor",
    "SizeReport",
    "dequantize",
    "dynamic_qparams",
    "integer_matmul",
    "quantize",
    "quantize_graph",
    "quantize_weight",
    "quantized_linear",
    "weight_qparams",
]

_TARGET = {
    OpKind.FusedAttention: (OpKind.QAttention, (1,)),
    OpKind.FusedRelPosAttention: (OpKind.QRelPosAttention, (2, 4)),
}
_KEPT_FLOAT = {
    OpKind.Conv1D: "convolution layers stay in float",
    OpKind.Gather: "embedding lookups stay in float",
}


@dataclass
class SizeReport:
    float_bytes: int
    quantized_bytes: int
    nodes_quantized: dict[str, int] = field(default_factory=dict)
    tensors_quantized: list[str] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.quantized_bytes / self.float_bytes if self.float_bytes else 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = self.ratio
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _quantizable_weight(g: Graph, name: str) -> bool:
    w = g.initializers.get(name)
    return isinstance(w, np.ndarray) and w.dtype == np.float32 and w.ndim == 2


def quantize_graph(g: Graph) -> tuple[Graph, SizeReport]:
    """Rewrite MatMul/FusedAttention/FusedRelPosAttention into their 8-bit kinds.

    A MatMul whose only consumer adds a float (N,) bias becomes one QMatMul
    carrying that bias, added after dequantization.
    """
    check(g)
    consumers = g.consumers()
    outputs = set(g.outputs)
    report = SizeReport(g.parameter_bytes(), 0)

    # which initializers get an int8 copy, and which nodes use it
    plan: dict[str, Node] = {}
    for n in g.nodes:
        if n.kind is OpKind.MatMul:
            if _quantizable_weight(g, n.inputs[1]):
                plan[n.id] = n
            elif n.inputs[1] in g.initializers:
                report.skipped.append({"node": n.id, "kind": n.kind.value, "reason": "weight is not a 2-D F32 matrix"})
        elif n.kind in _TARGET:
            plan[n.id] = n
        elif n.kind in _KEPT_FLOAT:
            report.skipped.append({"node": n.id, "kind": n.kind.value, "reason": _KEPT_FLOAT[n.kind]})

    weight_slots = {
        nid: ((1,) if n.kind is OpKind.MatMul else _TARGET[n.kind][1]) for nid, n in plan.items()
    }
    quantized_uses: dict[str, int] = {}
    for nid, slots in weight_slots.items():
        for s in slots:
            name = plan[nid].inputs[s]
            quantized_uses[name] = quantized_uses.get(name, 0) + 1
    inits = dict(g.initializers)
    renamed: dict[str, str] = {}
    for name, uses in quantized_uses.items():
        total = sum(1 for c in consumers.get(name, []) for i in c.inputs if i == name)
        target = name
        if total != uses:
            # the float tensor is still read elsewhere; keep it and add an int8 twin
            target = _fresh(f"{name}.int8", inits)
        inits[target] = quantize_weight(g.initializers[name])
        renamed[name] = target
        report.tensors_quantized.append(target)

    # fold MatMul + bias Add pairs
    folded: dict[str, Node] = {}
    for nid, n in plan.items():
        if n.kind is not OpKind.MatMul:
            continue
        users = consumers.get(n.outputs[0], [])
        if len(users) != 1 or n.outputs[0] in outputs:
            continue
        add = users[0]
        if add.kind is OpKind.Add and add.inputs[0] == n.outputs[0]:
            b = g.initializers.get(add.inputs[1])
            width = g.initializers[n.inputs[1]].shape[1]
            if isinstance(b, np.ndarray) and b.dtype == np.float32 and b.shape == (width,):
                folded[add.id] = n

    nodes = []
    folded_matmuls = {n.id for n in folded.values()}
    for n in g.nodes:
        if n.id in folded_matmuls:
            continue
        if n.id in folded:
            mm = folded[n.id]
            node = Node(mm.id, OpKind.QMatMul, (mm.inputs[0], renamed[mm.inputs[1]], n.inputs[1]), n.outputs)
        elif n.id in plan:
            kind = OpKind.QMatMul if n.kind is OpKind.MatMul else _TARGET[n.kind][0]
            ins = list(n.inputs)
            for s in weight_slots[n.id]:
                ins[s] = renamed[ins[s]]
            node = Node(n.id, kind, ins, n.outputs, n.attrs)
        else:
            nodes.append(n)
            continue
        report.nodes_quantized[node.kind.value] = report.nodes_quantized.get(node.kind.value, 0) + 1
        nodes.append(node)

    out = check(Graph(g.name, list(g.inputs), list(g.outputs), nodes, inits))
    report.quantized_bytes = out.parameter_bytes()
    return out, report


def _fresh(base: str, taken) -> str:
    name, i = base, 1
    while name in taken:
        i += 1
        name = f"{base}{i}"
    return name
