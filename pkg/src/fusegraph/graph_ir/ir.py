"""Core graph data structures."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any, Union

import numpy as np

from ..qtensor import QuantTensor
from ..tensor import DType
from .dims import Dim


class OpKind(str, enum.Enum):
    MatMul = "MatMul"
    Add = "Add"
    Sub = "Sub"
    Mul = "Mul"
    Div = "Div"
    Softmax = "Softmax"
    Transpose = "Transpose"
    Reshape = "Reshape"
    Concat = "Concat"
    Split = "Split"
    Slice = "Slice"
    Pad = "Pad"
    ReduceMean = "ReduceMean"
    Sqrt = "Sqrt"
    Pow = "Pow"
    Relu = "Relu"
    Sigmoid = "Sigmoid"
    Gather = "Gather"
    Conv1D = "Conv1D"
    LogSoftmax = "LogSoftmax"
    LayerNorm = "LayerNorm"
    FusedAttention = "FusedAttention"
    FusedRelPosAttention = "FusedRelPosAttention"
    QMatMul = "QMatMul"
    QAttention = "QAttention"
    QRelPosAttention = "QRelPosAttention"


FUSED_KINDS = frozenset({OpKind.LayerNorm, OpKind.FusedAttention, OpKind.FusedRelPosAttention})
QUANTIZED_KINDS = frozenset({OpKind.QMatMul, OpKind.QAttention, OpKind.QRelPosAttention})


@dataclass(frozen=True)
class OpSchema:
    min_inputs: int
    max_inputs: int
    required_attrs: tuple[str, ...] = ()
    outputs: int | None = 1  # None: variable (Split)


_UNARY = OpSchema(1, 1)
_BINARY = OpSchema(2, 2)

SCHEMAS: dict[OpKind, OpSchema] = {
    OpKind.MatMul: _BINARY,
    OpKind.Add: _BINARY,
    OpKind.Sub: _BINARY,
    OpKind.Mul: _BINARY,
    OpKind.Div: _BINARY,
    OpKind.Pow: _BINARY,
    OpKind.Softmax: OpSchema(1, 1, ("axis",)),
    OpKind.LogSoftmax: OpSchema(1, 1, ("axis",)),
    OpKind.Transpose: OpSchema(1, 1, ("perm",)),
    OpKind.Reshape: OpSchema(1, 1, ("shape",)),
    OpKind.Concat: OpSchema(1, 64, ("axis",)),
    OpKind.Split: OpSchema(1, 1, ("axis", "split"), outputs=None),
    OpKind.Slice: OpSchema(1, 1, ("starts", "ends", "axes")),
    OpKind.Pad: OpSchema(1, 1, ("pads",)),
    OpKind.ReduceMean: OpSchema(1, 1, ("axes", "keepdims")),
    OpKind.Sqrt: _UNARY,
    OpKind.Relu: _UNARY,
    OpKind.Sigmoid: _UNARY,
    OpKind.Gather: OpSchema(2, 2, ("axis",)),
    OpKind.Conv1D: OpSchema(2, 3, ("pads", "groups")),
    OpKind.LayerNorm: OpSchema(3, 3, ("eps",)),
    OpKind.FusedAttention: OpSchema(3, 4, ("num_heads",)),
    OpKind.FusedRelPosAttention: OpSchema(7, 8, ("num_heads",)),
    OpKind.QMatMul: OpSchema(2, 3),
    OpKind.QAttention: OpSchema(3, 4, ("num_heads",)),
    OpKind.QRelPosAttention: OpSchema(7, 8, ("num_heads",)),
}

# Slice bound meaning "through the end of the axis"
SLICE_END = 2 ** 62

AttrValue = Union[int, float, str, list]
Initializer = Union[np.ndarray, QuantTensor]


@dataclass(frozen=True)
class Node:
    id: str
    kind: OpKind
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: dict[str, AttrValue] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", OpKind(self.kind))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "attrs", {k: _normalize_attr(v) for k, v in self.attrs.items()})

    def attr(self, key: str, default: Any = None) -> Any:
        return self.attrs.get(key, default)


def _normalize_attr(v):
    # canonical python types so attrs compare equal after a manifest round trip
    if isinstance(v, (list, tuple)):
        return [_normalize_attr(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    if isinstance(v, str):
        return v
    raise TypeError(f"unsupported attribute value {v!r}")


@dataclass(frozen=True)
class ValueInfo:
    name: str
    dtype: DType
    shape: tuple[Dim, ...]


@dataclass
class Graph:
    name: str
    inputs: list[ValueInfo]
    outputs: list[str]
    nodes: list[Node]
    initializers: dict[str, Initializer] = field(default_factory=dict)
    value_info: dict[str, ValueInfo] = field(default_factory=dict)

    def input_names(self) -> list[str]:
        return [v.name for v in self.inputs]

    def producers(self) -> dict[str, Node]:
        return {out: n for n in self.nodes for out in n.outputs}

    def consumers(self) -> dict[str, list[Node]]:
        table: dict[str, list[Node]] = {}
        for n in self.nodes:
            for name in n.inputs:
                table.setdefault(name, []).append(n)
        return table

    def node_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for n in self.nodes:
            counts[n.kind.value] = counts.get(n.kind.value, 0) + 1
        return counts

    def parameter_bytes(self) -> int:
        from ..qtensor import QUANT_PARAMS_BYTES

        total = 0
        for value in self.initializers.values():
            total += value.nbytes
            if isinstance(value, QuantTensor):
                total += QUANT_PARAMS_BYTES
        return total

    def copy(self, **changes) -> "Graph":
        """Shallow structural copy; tensors are shared (graphs are treated as immutable)."""
        base = dict(
            inputs=list(self.inputs),
            outputs=list(self.outputs),
            nodes=list(self.nodes),
            initializers=dict(self.initializers),
            value_info=dict(self.value_info),
        )
        base.update(changes)
        return replace(self, **base)


def initializer_equal(a: Initializer, b: Initializer) -> bool:
    if isinstance(a, QuantTensor) or isinstance(b, QuantTensor):
        if not (isinstance(a, QuantTensor) and isinstance(b, QuantTensor)):
            return False
        return a.qp == b.qp and initializer_equal(a.data, b.data)
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def graphs_equal(a: Graph, b: Graph) -> bool:
    """Structural equality plus bitwise equality of every initializer."""
    if (a.name, a.inputs, a.outputs, a.nodes) != (b.name, b.inputs, b.outputs, b.nodes):
        return False
    if a.initializers.keys() != b.initializers.keys():
        return False
    return all(initializer_equal(a.initializers[k], b.initializers[k]) for k in a.initializers)
