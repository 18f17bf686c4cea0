"""Static graph representation, validation, shape inference and the GraphPack format."""

from .analysis import check, infer_shapes, topo_order, validate
from .dims import Dim, Sym, parse_dim
from .graphpack import Pack, load_graphpack, read_pack, save_graphpack, write_pack
from .ir import (
    FUSED_KINDS,
    QUANTIZED_KINDS,
    SLICE_END,
    Graph,
    Node,
    OpKind,
    ValueInfo,
    graphs_equal,
)

__all__ = [
    "Dim",
    "FUSED_KINDS",
    "Graph",
    "Node",
    "OpKind",
    "Pack",
    "QUANTIZED_KINDS",
    "SLICE_END",
    "Sym",
    "ValueInfo",
    "check",
    "graphs_equal",
    "infer_shapes",
    "load_graphpack",
    "parse_dim",
    "read_pack",
    "save_graphpack",
    "topo_order",
    "validate",
    "write_pack",
]
