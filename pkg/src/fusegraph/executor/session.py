"""Graph interpreter with reference-counted value lifetimes and per-kind timing."""

from __future__ import annotations

import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from ..errors import ExecutionError, FuseGraphError, SignatureError
from ..fusion.params import AttentionParams, RelPosParams
from ..graph_ir import Graph, Node, OpKind, SLICE_END, check, topo_order
from ..graph_ir.dims import Sym, evaluate, parse_dim
from ..tensor import DType, conv1d, layer_norm, log_softmax_last_axis, matmul, relu, sigmoid, softmax_last_axis
from . import kernels

WORKERS_ENV = "FUSEGRAPH_WORKERS"


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return 1


@dataclass
class RunStats:
    node_seconds: dict[str, float] = field(default_factory=dict)
    node_calls: dict[str, int] = field(default_factory=dict)
    peak_bytes: int = 0
    total_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "node_seconds": dict(sorted(self.node_seconds.items())),
            "node_calls": dict(sorted(self.node_calls.items())),
            "peak_bytes": self.peak_bytes,
            "total_seconds": self.total_seconds,
        }


@dataclass
class _Context:
    env: dict[str, int]
    pool: Optional[ThreadPoolExecutor]


OpFn = Callable[[Node, list, _Context], list]
OPS: dict[OpKind, OpFn] = {}


def op(*kinds: OpKind):
    def register(fn):
        for k in kinds:
            OPS[k] = fn
        return fn

    return register


@op(OpKind.MatMul)
def _matmul(node, args, ctx):
    return [matmul(args[0], args[1])]


@op(OpKind.QMatMul)
def _qmatmul(node, args, ctx):
    bias = args[2] if len(args) == 3 else None
    return [kernels.qmatmul_forward(args[0], args[1], bias)]


_BINARY = {
    OpKind.Add: np.add,
    OpKind.Sub: np.subtract,
    OpKind.Mul: np.multiply,
    OpKind.Div: np.divide,
    OpKind.Pow: np.power,
}


@op(*_BINARY)
def _binary(node, args, ctx):
    return [_BINARY[node.kind](args[0], args[1])]


@op(OpKind.Sqrt)
def _sqrt(node, args, ctx):
    return [np.sqrt(args[0])]


@op(OpKind.Relu)
def _relu(node, args, ctx):
    return [relu(args[0])]


@op(OpKind.Sigmoid)
def _sigmoid(node, args, ctx):
    return [sigmoid(args[0])]


@op(OpKind.Softmax)
def _softmax(node, args, ctx):
    return [softmax_last_axis(args[0])]


@op(OpKind.LogSoftmax)
def _log_softmax(node, args, ctx):
    return [log_softmax_last_axis(args[0])]


@op(OpKind.Transpose)
def _transpose(node, args, ctx):
    return [np.transpose(args[0], node.attr("perm"))]


@op(OpKind.Reshape)
def _reshape(node, args, ctx):
    shape = [evaluate(parse_dim(d), ctx.env) for d in node.attr("shape")]
    return [np.reshape(args[0], shape)]


@op(OpKind.Concat)
def _concat(node, args, ctx):
    return [np.concatenate(args, axis=node.attr("axis"))]


@op(OpKind.Split)
def _split(node, args, ctx):
    bounds = np.cumsum(node.attr("split"))[:-1]
    return list(np.split(args[0], bounds, axis=node.attr("axis")))


@op(OpKind.Slice)
def _slice(node, args, ctx):
    x = args[0]
    index = [slice(None)] * x.ndim
    for start, end, axis in zip(node.attr("starts"), node.attr("ends"), node.attr("axes")):
        lo = evaluate(parse_dim(start), ctx.env)
        hi = None if end == SLICE_END else evaluate(parse_dim(end), ctx.env)
        index[axis] = slice(lo, hi)
    return [x[tuple(index)]]


@op(OpKind.Pad)
def _pad(node, args, ctx):
    x = args[0]
    pads = node.attr("pads")
    rank = x.ndim
    widths = [(pads[i], pads[i + rank]) for i in range(rank)]
    return [np.pad(x, widths, constant_values=x.dtype.type(node.attr("value", 0.0)))]


@op(OpKind.ReduceMean)
def _reduce_mean(node, args, ctx):
    return [np.mean(args[0], axis=tuple(node.attr("axes")), keepdims=bool(node.attr("keepdims")))]


@op(OpKind.Gather)
def _gather(node, args, ctx):
    data, idx = args
    if idx.size and (idx.min() < 0 or idx.max() >= data.shape[0]):
        raise ExecutionError(f"Gather index out of range [0, {data.shape[0]})")
    return [np.take(data, idx, axis=0)]


@op(OpKind.Conv1D)
def _conv(node, args, ctx):
    bias = args[2] if len(args) == 3 else None
    return [conv1d(args[0], args[1], bias, tuple(node.attr("pads")), node.attr("groups"))]


@op(OpKind.LayerNorm)
def _layer_norm(node, args, ctx):
    return [layer_norm(args[0], args[1], args[2], node.attr("eps"))]


@op(OpKind.FusedAttention, OpKind.QAttention)
def _attention(node, args, ctx):
    p = AttentionParams(node.attr("num_heads"), args[1], args[2])
    mask = args[3] if len(args) == 4 else None
    return [kernels.fused_attention_forward(args[0], p, mask, ctx.pool)]


@op(OpKind.FusedRelPosAttention, OpKind.QRelPosAttention)
def _relpos(node, args, ctx):
    x, pos_emb, w_qkv, b_qkv, w_pos, u, v = args[:7]
    p = RelPosParams(node.attr("num_heads"), w_qkv, b_qkv, w_pos, u, v, pos_emb)
    mask = args[7] if len(args) == 8 else None
    return [kernels.relpos_attention_forward(x, p, mask, ctx.pool)]


def _nbytes(value) -> int:
    return int(getattr(value, "nbytes", 0))


class Session:
    """Executes one graph. ``workers`` bounds the head-level parallelism of fused nodes.

    A session runs one request at a time; use separate sessions for concurrency.
    """

    def __init__(self, graph: Graph, workers: Optional[int] = None):
        check(graph)
        self.graph = graph
        self.workers = default_workers() if workers is None else max(1, int(workers))
        self.plan = topo_order(graph)
        self._pool = ThreadPoolExecutor(self.workers, thread_name_prefix="fusegraph") if self.workers > 1 else None
        self._lock = threading.Lock()
        uses: dict[str, int] = {}
        for node in self.plan:
            for name in node.inputs:
                uses[name] = uses.get(name, 0) + 1
        self._uses = uses

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def bind(self, inputs: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], dict[str, int]]:
        """Check inputs against the signature and solve the symbolic dims."""
        env: dict[str, int] = {}
        bound: dict[str, np.ndarray] = {}
        for info in self.graph.inputs:
            if info.name not in inputs:
                raise SignatureError(f"missing graph input {info.name}")
            arr = np.asarray(inputs[info.name])
            want = info.dtype.numpy
            if arr.dtype != want:
                if np.can_cast(arr.dtype, want, casting="same_kind") or (
                    info.dtype is DType.I32 and arr.dtype.kind in "iu"
                ):
                    arr = arr.astype(want)
                else:
                    raise SignatureError(f"input {info.name} has dtype {arr.dtype}, expected {info.dtype.value}")
            if arr.ndim != len(info.shape):
                raise SignatureError(f"input {info.name} has rank {arr.ndim}, expected {len(info.shape)}")
            for dim, actual in zip(info.shape, arr.shape):
                if isinstance(dim, Sym):
                    value, rem = divmod(actual - dim.const, dim.coef)
                    if rem or value < 0:
                        raise SignatureError(f"input {info.name}: extent {actual} does not fit {dim}")
                    if env.setdefault(dim.name, value) != value:
                        raise SignatureError(
                            f"input {info.name}: {dim.name}={value} conflicts with {dim.name}={env[dim.name]}"
                        )
                elif dim != actual:
                    raise SignatureError(f"input {info.name} has shape {arr.shape}, expected dim {dim}")
            bound[info.name] = np.require(arr, requirements="C")
        return bound, env

    def run(self, inputs: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], RunStats]:
        with self._lock:
            return self._run(inputs)

    def _run(self, inputs):
        bound, env = self.bind(inputs)
        ctx = _Context(env, self._pool)
        stats = RunStats()
        inits = self.graph.initializers
        outputs = set(self.graph.outputs)
        table: dict[str, np.ndarray] = dict(bound)
        remaining = dict(self._uses)
        live = sum(_nbytes(v) for v in table.values())
        stats.peak_bytes = live
        start = time.perf_counter()
        for node in self.plan:
            args = [table[i] if i in table else inits[i] for i in node.inputs]
            t0 = time.perf_counter()
            try:
                results = OPS[node.kind](node, args, ctx)
            except FuseGraphError as exc:
                raise ExecutionError(f"node {node.id} ({node.kind.value}): {exc}") from exc
            except (ValueError, IndexError, TypeError) as exc:
                raise ExecutionError(f"node {node.id} ({node.kind.value}): {exc}") from exc
            kind = node.kind.value
            stats.node_seconds[kind] = stats.node_seconds.get(kind, 0.0) + time.perf_counter() - t0
            stats.node_calls[kind] = stats.node_calls.get(kind, 0) + 1
            for name, value in zip(node.outputs, results):
                table[name] = value
                live += _nbytes(value)
            stats.peak_bytes = max(stats.peak_bytes, live)
            for name in node.inputs:
                if name not in table:
                    continue
                remaining[name] -= 1
                if remaining[name] == 0 and name not in outputs:
                    live -= _nbytes(table.pop(name))
            for name in node.outputs:
                # values nobody reads die immediately
                if remaining.get(name, 0) == 0 and name not in outputs and name in table:
                    live -= _nbytes(table.pop(name))
        stats.total_seconds = time.perf_counter() - start
        try:
            result = {name: table[name] for name in self.graph.outputs}
        except KeyError as exc:
            raise ExecutionError(f"graph output {exc.args[0]} was never produced") from None
        return result, stats


def run(graph: Graph, inputs: Mapping[str, np.ndarray], workers: Optional[int] = None):
    """One-shot convenience wrapper around :class:`Session`."""
    with Session(graph, workers) as s:
        return s.run(inputs)
