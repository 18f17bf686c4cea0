"""Packed per-layer weights carried by fused attention nodes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ..errors import ConfigError, ShapeError
from ..qtensor import QuantTensor

Weight = Union[np.ndarray, QuantTensor]


@dataclass(frozen=True)
class AttentionParams:
    """Q, K and V projections packed column-wise as one (D, 3D) matrix, in that order."""

    heads: int
    w_qkv: Weight
    b_qkv: np.ndarray

    def __post_init__(self):
        d = self.w_qkv.shape[0]
        if self.heads < 1 or d % self.heads:
            raise ConfigError(f"hidden size {d} is not divisible by {self.heads} heads")
        if tuple(self.w_qkv.shape) != (d, 3 * d) or self.b_qkv.shape != (3 * d,):
            raise ShapeError(f"packed QKV weight {self.w_qkv.shape} / bias {self.b_qkv.shape} do not fit D={d}")

    @property
    def d_model(self) -> int:
        return self.w_qkv.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d_k)

    @classmethod
    def pack(cls, heads, wq, wk, wv, bq, bk, bv) -> "AttentionParams":
        w = np.concatenate([wq, wk, wv], axis=1).astype(np.float32)
        b = np.concatenate([bq, bk, bv]).astype(np.float32)
        return cls(heads, np.ascontiguousarray(w), np.ascontiguousarray(b))

    def unpack(self) -> tuple[np.ndarray, ...]:
        """(wq, wk, wv, bq, bk, bv) from the packed float buffers."""
        if isinstance(self.w_qkv, QuantTensor):
            raise TypeError("cannot unpack quantized weights")
        d = self.d_model
        w, b = self.w_qkv, self.b_qkv
        return w[:, :d], w[:, d:2 * d], w[:, 2 * d:], b[:d], b[d:2 * d], b[2 * d:]


@dataclass(frozen=True)
class RelPosParams(AttentionParams):
    """Adds the positional projection, the u/v biases and the (2L-1, D) embedding table.

    Row ``L - 1`` of ``pos_emb`` is relative distance 0; row ``k`` is distance ``L - 1 - k``.
    """

    w_pos: Optional[Weight] = None
    pos_bias_u: Optional[np.ndarray] = None
    pos_bias_v: Optional[np.ndarray] = None
    pos_emb: Optional[np.ndarray] = None

    def __post_init__(self):
        super().__post_init__()
        d, h, dk = self.d_model, self.heads, self.d_k
        if self.w_pos is None or tuple(self.w_pos.shape) != (d, d):
            raise ShapeError(f"positional projection must be ({d}, {d})")
        for name in ("pos_bias_u", "pos_bias_v"):
            value = getattr(self, name)
            if value is None or value.shape != (h, dk):
                raise ShapeError(f"{name} must be ({h}, {dk})")
        if self.pos_emb is not None and (self.pos_emb.ndim != 2 or self.pos_emb.shape[1] != d):
            raise ShapeError(f"positional table must be (2L-1, {d}), got {self.pos_emb.shape}")

    def with_pos_emb(self, pos_emb: np.ndarray) -> "RelPosParams":
        return RelPosParams(
            self.heads, self.w_qkv, self.b_qkv, self.w_pos, self.pos_bias_u, self.pos_bias_v, pos_emb
        )
