"""Per-op shape and dtype inference rules over (possibly symbolic) dims."""

from __future__ import annotations

from typing import Callable

from ..errors import ShapeError
from ..tensor import DType
from .dims import Dim, Sym, infer_missing, parse_dim, same_numel, sample_envs, symbols, evaluate
from .ir import SLICE_END, Node, OpKind

Spec = tuple[DType, tuple[Dim, ...]]
Rule = Callable[[Node, list[Spec]], list[Spec]]

RULES: dict[OpKind, Rule] = {}


def rule(*kinds: OpKind):
    def register(fn: Rule) -> Rule:
        for k in kinds:
            RULES[k] = fn
        return fn

    return register


def fmt(shape) -> str:
    return "(" + ", ".join(str(d) for d in shape) + ")"


def broadcast(a, b) -> tuple[Dim, ...]:
    rank = max(len(a), len(b))
    a = (1,) * (rank - len(a)) + tuple(a)
    b = (1,) * (rank - len(b)) + tuple(b)
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"shapes {fmt(a)} and {fmt(b)} are not broadcastable")
    return tuple(out)


def _require_f32(specs: list[Spec], *idx: int) -> None:
    for i in idx:
        if specs[i][0] is not DType.F32:
            raise ShapeError(f"input {i} must be F32, got {specs[i][0].value}")


def _axis(axis: int, rank: int) -> int:
    if not -rank <= axis < rank:
        raise ShapeError(f"axis {axis} out of range for rank {rank}")
    return axis % rank


def _le_everywhere(a: Dim, b: Dim) -> bool:
    names = symbols((a, b))
    return all(evaluate(a, env) <= evaluate(b, env) for env in sample_envs(names) or [{}])


def _matmul_shape(a, b) -> tuple[Dim, ...]:
    if len(a) < 2 or len(b) < 2:
        raise ShapeError(f"MatMul needs rank >= 2 operands, got {fmt(a)} and {fmt(b)}")
    if a[-1] != b[-2]:
        raise ShapeError(f"MatMul inner dimension mismatch: {fmt(a)} @ {fmt(b)}")
    return broadcast(a[:-2], b[:-2]) + (a[-2], b[-1])


@rule(OpKind.MatMul)
def _matmul(node, specs):
    _require_f32(specs, 0, 1)
    return [(DType.F32, _matmul_shape(specs[0][1], specs[1][1]))]


@rule(OpKind.QMatMul)
def _qmatmul(node, specs):
    _require_f32(specs, 0)
    if specs[1][0] is not DType.I8:
        raise ShapeError("QMatMul weight must be a quantized I8 initializer")
    out = _matmul_shape(specs[0][1], specs[1][1])
    if len(specs) == 3 and specs[2][1] != (out[-1],):
        raise ShapeError(f"QMatMul bias {fmt(specs[2][1])} does not match output width {out[-1]}")
    return [(DType.F32, out)]


@rule(OpKind.Add, OpKind.Sub, OpKind.Mul, OpKind.Div, OpKind.Pow)
def _elementwise(node, specs):
    _require_f32(specs, 0, 1)
    return [(DType.F32, broadcast(specs[0][1], specs[1][1]))]


@rule(OpKind.Sqrt, OpKind.Relu, OpKind.Sigmoid)
def _unary(node, specs):
    _require_f32(specs, 0)
    return [specs[0]]


@rule(OpKind.Softmax, OpKind.LogSoftmax)
def _softmax(node, specs):
    _require_f32(specs, 0)
    shape = specs[0][1]
    if not shape:
        raise ShapeError("softmax of a scalar")
    if _axis(node.attr("axis"), len(shape)) != len(shape) - 1:
        raise ShapeError("only last-axis softmax is supported")
    return [specs[0]]


@rule(OpKind.Transpose)
def _transpose(node, specs):
    dtype, shape = specs[0]
    perm = node.attr("perm")
    if sorted(perm) != list(range(len(shape))):
        raise ShapeError(f"perm {perm} is not a permutation of rank {len(shape)}")
    return [(dtype, tuple(shape[p] for p in perm))]


@rule(OpKind.Reshape)
def _reshape(node, specs):
    dtype, shape = specs[0]
    target = [parse_dim(d) for d in node.attr("shape")]
    holes = [i for i, d in enumerate(target) if d == -1]
    if len(holes) > 1:
        raise ShapeError("Reshape allows at most one -1 entry")
    if any(isinstance(d, int) and d < -1 for d in target):
        raise ShapeError(f"invalid Reshape target {node.attr('shape')}")
    if holes:
        known = [d for d in target if d != -1]
        target[holes[0]] = infer_missing(known, shape)
    target = tuple(target)
    if not same_numel(shape, target):
        raise ShapeError(f"cannot reshape {fmt(shape)} to {fmt(target)}")
    return [(dtype, target)]


@rule(OpKind.Concat)
def _concat(node, specs):
    dtype, first = specs[0]
    axis = _axis(node.attr("axis"), len(first))
    total: Dim = 0
    for d, shape in specs:
        if d is not dtype or len(shape) != len(first):
            raise ShapeError("Concat inputs must share dtype and rank")
        for i, (x, y) in enumerate(zip(shape, first)):
            if i != axis and x != y:
                raise ShapeError(f"Concat inputs disagree off-axis: {fmt(shape)} vs {fmt(first)}")
        total = total + shape[axis]
    return [(dtype, first[:axis] + (total,) + first[axis + 1:])]


@rule(OpKind.Split)
def _split(node, specs):
    dtype, shape = specs[0]
    axis = _axis(node.attr("axis"), len(shape))
    sizes = node.attr("split")
    if len(sizes) != len(node.outputs):
        raise ShapeError(f"Split has {len(sizes)} sizes but {len(node.outputs)} outputs")
    if shape[axis] != sum(sizes):
        raise ShapeError(f"Split sizes {sizes} do not cover axis extent {shape[axis]}")
    return [(dtype, shape[:axis] + (s,) + shape[axis + 1:]) for s in sizes]


@rule(OpKind.Slice)
def _slice(node, specs):
    dtype, shape = specs[0]
    out = list(shape)
    starts, ends, axes = node.attr("starts"), node.attr("ends"), node.attr("axes")
    if not len(starts) == len(ends) == len(axes):
        raise ShapeError("Slice starts/ends/axes lengths differ")
    for start, end, axis in zip(starts, ends, axes):
        axis = _axis(axis, len(shape))
        extent = shape[axis]
        start = parse_dim(start)
        end = extent if end == SLICE_END else parse_dim(end)
        if isinstance(start, int) and start < 0 or isinstance(end, int) and end < 0:
            raise ShapeError("negative Slice bounds are not supported")
        if not (_le_everywhere(start, end) and _le_everywhere(end, extent)):
            raise ShapeError(f"Slice [{start}:{end}] out of range for extent {extent}")
        out[axis] = end - start
    return [(dtype, tuple(out))]


@rule(OpKind.Pad)
def _pad(node, specs):
    dtype, shape = specs[0]
    pads = node.attr("pads")
    rank = len(shape)
    if len(pads) != 2 * rank or any(p < 0 for p in pads):
        raise ShapeError(f"Pad needs {2 * rank} non-negative pads, got {pads}")
    return [(dtype, tuple(d + pads[i] + pads[i + rank] for i, d in enumerate(shape)))]


@rule(OpKind.ReduceMean)
def _reduce_mean(node, specs):
    _require_f32(specs, 0)
    shape = specs[0][1]
    axes = {_axis(a, len(shape)) for a in node.attr("axes")}
    if node.attr("keepdims"):
        return [(DType.F32, tuple(1 if i in axes else d for i, d in enumerate(shape)))]
    return [(DType.F32, tuple(d for i, d in enumerate(shape) if i not in axes))]


@rule(OpKind.Gather)
def _gather(node, specs):
    (dtype, data), (idx_dtype, idx) = specs
    if node.attr("axis") != 0:
        raise ShapeError("Gather supports axis 0 only")
    if idx_dtype is not DType.I32:
        raise ShapeError("Gather indices must be I32")
    return [(dtype, tuple(idx) + tuple(data[1:]))]


@rule(OpKind.Conv1D)
def _conv1d(node, specs):
    _require_f32(specs, 0, 1)
    x, w = specs[0][1], specs[1][1]
    groups = node.attr("groups")
    left, right = node.attr("pads")
    if len(x) != 2 or len(w) != 3:
        raise ShapeError(f"Conv1D expects x (T, C) and w (O, C/g, K), got {fmt(x)} and {fmt(w)}")
    c_out, c_per_group, k = w
    if groups < 1 or x[1] != c_per_group * groups or c_out % groups:
        raise ShapeError(f"Conv1D channel mismatch: x {fmt(x)}, w {fmt(w)}, groups={groups}")
    if len(specs) == 3 and specs[2][1] != (c_out,):
        raise ShapeError(f"Conv1D bias {fmt(specs[2][1])} does not match {c_out} channels")
    return [(DType.F32, (x[0] + (left + right - k + 1), c_out))]


@rule(OpKind.LayerNorm)
def _layer_norm(node, specs):
    _require_f32(specs, 0, 1, 2)
    x = specs[0][1]
    for name, (_, s) in zip(("gamma", "beta"), specs[1:]):
        if s != (x[-1],):
            raise ShapeError(f"LayerNorm {name} {fmt(s)} does not match last axis {x[-1]}")
    if not node.attr("eps") > 0:
        raise ShapeError("LayerNorm eps must be positive")
    return [specs[0]]


def _attention_common(node, specs, quantized: bool) -> tuple[Dim, int, int]:
    _require_f32(specs, 0)
    x = specs[0][1]
    if len(x) != 2:
        raise ShapeError(f"attention input must be (L, D), got {fmt(x)}")
    length, d = x
    heads = node.attr("num_heads")
    if not isinstance(d, int) or heads < 1 or d % heads:
        raise ShapeError(f"hidden size {d} is not divisible by {heads} heads")
    return length, d, heads


def _check_qkv(w_spec, b_spec, d: int, quantized: bool) -> None:
    want = DType.I8 if quantized else DType.F32
    if w_spec[0] is not want:
        raise ShapeError(f"packed QKV weight must be {want.value}")
    if w_spec[1] != (d, 3 * d) or b_spec[1] != (3 * d,):
        raise ShapeError(f"packed QKV weight {fmt(w_spec[1])} / bias {fmt(b_spec[1])} do not fit D={d}")


def _check_mask(mask_shape, heads: int, length: Dim) -> None:
    broadcast(mask_shape, (heads, length, length))


def _attention(quantized: bool):
    def infer(node, specs):
        length, d, heads = _attention_common(node, specs, quantized)
        _check_qkv(specs[1], specs[2], d, quantized)
        if len(specs) == 4:
            _check_mask(specs[3][1], heads, length)
        return [(DType.F32, (length, d))]

    return infer


def _relpos_attention(quantized: bool):
    def infer(node, specs):
        length, d, heads = _attention_common(node, specs, quantized)
        pos = specs[1][1]
        want_rows = length * 2 - 1
        if pos != (want_rows, d):
            raise ShapeError(f"positional table {fmt(pos)} must be ({want_rows}, {d})")
        _check_qkv(specs[2], specs[3], d, quantized)
        want = DType.I8 if quantized else DType.F32
        if specs[4][0] is not want or specs[4][1] != (d, d):
            raise ShapeError(f"positional projection must be {want.value} ({d}, {d})")
        dk = d // heads
        for name, s in zip(("u", "v"), specs[5:7]):
            if s[1] != (heads, dk):
                raise ShapeError(f"positional bias {name} {fmt(s[1])} must be ({heads}, {dk})")
        if len(specs) == 8:
            _check_mask(specs[7][1], heads, length)
        return [(DType.F32, (length, d))]

    return infer


RULES[OpKind.FusedAttention] = _attention(False)
RULES[OpKind.QAttention] = _attention(True)
RULES[OpKind.FusedRelPosAttention] = _relpos_attention(False)
RULES[OpKind.QRelPosAttention] = _relpos_attention(True)
