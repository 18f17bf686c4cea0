"""Attention kernels: the sequential reference and the packed per-head fused forms.

Fused kernels hand heads to a worker pool. Each head reads shared inputs and
writes a disjoint column block of the output, with a fixed reduction order
inside the head, so results are bit-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import Executor
from typing import Callable, Optional

import numpy as np

from ..errors import ExecutionError, ShapeError
from ..fusion.params import AttentionParams, RelPosParams, Weight
from ..qtensor import QuantTensor, quantized_linear
from ..tensor import concat_heads, matmul, softmax_last_axis, split_heads


def linear(x: np.ndarray, w: Weight, bias: Optional[np.ndarray]) -> np.ndarray:
    if isinstance(w, QuantTensor):
        return quantized_linear(x, w, bias)
    out = matmul(x, w)
    if bias is not None:
        out = out + bias
    return out


def _check_input(x: np.ndarray, d: int) -> int:
    if x.ndim != 2 or x.shape[1] != d:
        raise ExecutionError(f"attention input must be (L, {d}), got {x.shape}")
    return x.shape[0]


def _head_mask(mask: Optional[np.ndarray], h: int, heads: int, length: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    try:
        full = np.broadcast_to(mask, (heads, length, length))
    except ValueError:
        raise ExecutionError(f"mask {mask.shape} does not broadcast to ({heads}, {length}, L)") from None
    return full[h]


def _dispatch(fn: Callable[[int], None], heads: int, pool: Optional[Executor]) -> None:
    if pool is None or heads == 1:
        for h in range(heads):
            fn(h)
    else:
        # list() re-raises the first worker exception
        list(pool.map(fn, range(heads)))


def attention_forward(x: np.ndarray, p: AttentionParams, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Unfused reference: three separate projections, heads one after another."""
    length = _check_input(x, p.d_model)
    wq, wk, wv, bq, bk, bv = p.unpack()
    q = split_heads(matmul(x, wq) + bq, p.heads)
    k = split_heads(matmul(x, wk) + bk, p.heads)
    v = split_heads(matmul(x, wv) + bv, p.heads)
    heads = []
    for h in range(p.heads):
        logits = matmul(q[h], k[h].T) * np.float32(p.scale)
        m = _head_mask(mask, h, p.heads, length)
        if m is not None:
            logits = logits + m
        heads.append(matmul(softmax_last_axis(logits), v[h]))
    return concat_heads(np.stack(heads))


def fused_attention_forward(
    x: np.ndarray,
    p: AttentionParams,
    mask: Optional[np.ndarray] = None,
    pool: Optional[Executor] = None,
) -> np.ndarray:
    """One packed (D, 3D) projection, then heads dispatched to ``pool``."""
    length = _check_input(x, p.d_model)
    d, dk = p.d_model, p.d_k
    qkv = linear(x, p.w_qkv, p.b_qkv)
    out = np.empty((length, d), dtype=np.float32)
    scale = np.float32(p.scale)

    def head(h: int) -> None:
        cols = slice(h * dk, (h + 1) * dk)
        q = qkv[:, cols]
        k = qkv[:, d + h * dk:d + (h + 1) * dk]
        v = qkv[:, 2 * d + h * dk:2 * d + (h + 1) * dk]
        logits = matmul(q, k.T) * scale
        m = _head_mask(mask, h, p.heads, length)
        if m is not None:
            logits = logits + m
        out[:, cols] = matmul(softmax_last_axis(logits), v)

    _dispatch(head, p.heads, pool)
    return out


def skew_relative(bd_flat: np.ndarray) -> np.ndarray:
    """Map (..., L, 2L-1) relative scores to (..., L, L): ``out[i, j] = bd[i, L-1+j-i]``."""
    if bd_flat.ndim < 2:
        raise ShapeError(f"skew_relative needs rank >= 2, got {bd_flat.shape}")
    length, width = bd_flat.shape[-2:]
    if width != 2 * length - 1:
        raise ShapeError(f"relative axis must have 2L-1 = {2 * length - 1} entries, got {width}")
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    idx = np.broadcast_to(length - 1 + j - i, bd_flat.shape[:-2] + (length, length))
    return np.take_along_axis(bd_flat, idx, axis=-1)


def relpos_attention_forward(
    x: np.ndarray,
    p: RelPosParams,
    mask: Optional[np.ndarray] = None,
    pool: Optional[Executor] = None,
) -> np.ndarray:
    """Relative-position attention with content (u) and position (v) biases, per head.

    logits = ((q + u) k^T + skew((q + v) (R W_pos)^T)) / sqrt(d_k)
    """
    length = _check_input(x, p.d_model)
    if p.pos_emb is None or p.pos_emb.shape[0] != 2 * length - 1:
        got = None if p.pos_emb is None else p.pos_emb.shape
        raise ShapeError(f"positional table must have {2 * length - 1} rows for L={length}, got {got}")
    d, dk = p.d_model, p.d_k
    qkv = linear(x, p.w_qkv, p.b_qkv)
    pos = linear(p.pos_emb, p.w_pos, None)
    out = np.empty((length, d), dtype=np.float32)
    scale = np.float32(p.scale)

    def head(h: int) -> None:
        cols = slice(h * dk, (h + 1) * dk)
        q = qkv[:, cols]
        k = qkv[:, d + h * dk:d + (h + 1) * dk]
        v = qkv[:, 2 * d + h * dk:2 * d + (h + 1) * dk]
        ac = matmul(q + p.pos_bias_u[h], k.T)
        bd = skew_relative(matmul(q + p.pos_bias_v[h], pos[:, cols].T))
        logits = (ac + bd) * scale
        m = _head_mask(mask, h, p.heads, length)
        if m is not None:
            logits = logits + m
        out[:, cols] = matmul(softmax_last_axis(logits), v)

    _dispatch(head, p.heads, pool)
    return out


def qmatmul_forward(x: np.ndarray, w: QuantTensor, bias: Optional[np.ndarray] = None) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"quantized matmul inner dimension mismatch: {x.shape} @ {w.shape}")
    return quantized_linear(x, w, bias)
