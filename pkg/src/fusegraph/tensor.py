"""Dense tensor helpers and the float kernels every executor is built from.

Tensors are plain row-major numpy arrays. Only three element types are
used anywhere in the package: float32, int8 (quantized weights) and int32
(integer accumulators, token ids).
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import ConfigError, ShapeError


class DType(enum.Enum):
    F32 = "F32"
    I8 = "I8"
    I32 = "I32"

    @property
    def numpy(self) -> np.dtype:
        return _NUMPY[self]

    @property
    def itemsize(self) -> int:
        return self.numpy.itemsize

    @classmethod
    def of(cls, arr: np.ndarray) -> "DType":
        try:
            return _FROM_NUMPY[np.dtype(arr.dtype)]
        except KeyError:
            raise TypeError(f"unsupported tensor dtype {arr.dtype}") from None


_NUMPY = {
    DType.F32: np.dtype("<f4"),
    DType.I8: np.dtype("i1"),
    DType.I32: np.dtype("<i4"),
}
_FROM_NUMPY = {np.dtype(v): k for k, v in _NUMPY.items()}


def as_tensor(value, dtype: DType = DType.F32) -> np.ndarray:
    """Return a C-contiguous array of the given dtype (copying only if needed)."""
    return np.require(value, dtype.numpy, "C")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Float32 matrix product with optional broadcast leading batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None
    return np.matmul(a, b, dtype=np.float32)


def softmax_last_axis(x: np.ndarray) -> np.ndarray:
    if x.ndim < 1 or x.shape[-1] == 0:
        raise ShapeError(f"softmax over an empty last axis (shape {x.shape})")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax_last_axis(x: np.ndarray) -> np.ndarray:
    if x.ndim < 1 or x.shape[-1] == 0:
        raise ShapeError(f"log-softmax over an empty last axis (shape {x.shape})")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    """Normalize over the last axis with biased variance, eps inside the sqrt.

    The arithmetic order deliberately mirrors the primitive chain
    ReduceMean/Sub/Pow/ReduceMean/Add/Sqrt/Div/Mul/Add so a fused node
    reproduces the unfused graph to the last bit on the same inputs.
    """
    n = x.shape[-1] if x.ndim else 0
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm gamma {gamma.shape} / beta {beta.shape} do not match last axis {n}"
        )
    if not eps > 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    eps_t = np.float32(eps)
    mean = np.mean(x, axis=-1, keepdims=True)
    d = x - mean
    var = np.mean(np.power(d, np.float32(2.0)), axis=-1, keepdims=True)
    return d / np.sqrt(var + eps_t) * gamma + beta


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(L, D) -> (H, L, D // H)."""
    if x.ndim != 2:
        raise ShapeError(f"split_heads expects an (L, D) tensor, got {x.shape}")
    length, d = x.shape
    if heads < 1 or d % heads:
        raise ConfigError(f"hidden size {d} is not divisible by head count {heads}")
    return np.ascontiguousarray(x.reshape(length, heads, d // heads).transpose(1, 0, 2))


def concat_heads(x: np.ndarray) -> np.ndarray:
    """(H, L, d_k) -> (L, H * d_k)."""
    if x.ndim != 3:
        raise ShapeError(f"concat_heads expects an (H, L, d_k) tensor, got {x.shape}")
    heads, length, dk = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(length, heads * dk))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.float32(0.0))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def conv1d(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None, pads: tuple[int, int], groups: int) -> np.ndarray:
    """Time-major 1-D convolution: x (T, C_in), w (C_out, C_in // groups, K) -> (T', C_out)."""
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x (T, C) and w (O, C/g, K); got {x.shape}, {w.shape}")
    t, c_in = x.shape
    c_out, c_per_group, k = w.shape
    if groups < 1 or c_in % groups or c_out % groups or c_in // groups != c_per_group:
        raise ShapeError(f"conv1d channel/group mismatch: x {x.shape}, w {w.shape}, groups={groups}")
    left, right = pads
    xp = np.pad(x, ((left, right), (0, 0)))
    t_out = t + left + right - k + 1
    if t_out < 0:
        raise ShapeError(f"conv1d kernel {k} longer than padded input {t + left + right}")
    out_per_group = c_out // groups
    out = np.zeros((t_out, c_out), dtype=np.float32)
    if c_per_group == 1 and out_per_group == 1:
        # depthwise: one multiply-add per tap
        for tap in range(k):
            out += xp[tap:tap + t_out] * w[:, 0, tap]
    else:
        for g in range(groups):
            cin = slice(g * c_per_group, (g + 1) * c_per_group)
            cout = slice(g * out_per_group, (g + 1) * out_per_group)
            for tap in range(k):
                out[:, cout] += xp[tap:tap + t_out, cin] @ w[cout, :, tap].T
    if bias is not None:
        out += bias
    return out
