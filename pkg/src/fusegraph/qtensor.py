"""Affine 8-bit quantization primitives.

Convention: ``q = round(x * s + z)`` where ``s`` maps floats into the
integer domain (a multiplier, not a divisor) and ``z`` is the integer that
float 0.0 lands on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericInputError

# activations: asymmetric unsigned, weights: symmetric signed
ACT_QMIN, ACT_QMAX = 0, 255
WEIGHT_QMIN, WEIGHT_QMAX = -127, 127

# bytes charged per quantized tensor for its (scale, zero point) pair
QUANT_PARAMS_BYTES = 8


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    qmin: int
    qmax: int

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ConfigError(f"quantization scale must be finite and positive, got {self.scale}")
        if not self.qmin <= self.zero_point <= self.qmax:
            raise ConfigError(f"zero point {self.zero_point} outside [{self.qmin}, {self.qmax}]")

    @property
    def step(self) -> float:
        """Float width of one integer level."""
        return 1.0 / self.scale


@dataclass(frozen=True)
class QuantTensor:
    data: np.ndarray
    qp: QuantParams
    clamped: int = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return self.data.nbytes


def dynamic_qparams(x: np.ndarray, qmin: int = ACT_QMIN, qmax: int = ACT_QMAX) -> QuantParams:
    """Derive (scale, zero point) from the zero-inclusive range of ``x``."""
    if x.size == 0:
        raise NumericInputError("cannot derive quantization parameters from an empty tensor")
    lo = float(np.min(x))
    hi = float(np.max(x))
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NumericInputError("non-finite value in tensor to be quantized")
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if hi == lo:
        return QuantParams(1.0, min(max(0, qmin), qmax), qmin, qmax)
    scale = (qmax - qmin) / (hi - lo)
    zero_point = int(np.clip(np.rint(qmin - lo * scale), qmin, qmax))
    return QuantParams(scale, zero_point, qmin, qmax)


def weight_qparams(w: np.ndarray) -> QuantParams:
    """Symmetric per-tensor parameters for a weight (zero point fixed at 0)."""
    if w.size and not np.all(np.isfinite(w)):
        raise NumericInputError("non-finite value in weight tensor")
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = WEIGHT_QMAX / peak if peak > 0 else 1.0
    return QuantParams(scale, 0, WEIGHT_QMIN, WEIGHT_QMAX)


def _storage_dtype(qp: QuantParams) -> np.dtype:
    if qp.qmin >= 0 and qp.qmax <= 255:
        return np.dtype(np.uint8)
    if qp.qmin >= -128 and qp.qmax <= 127:
        return np.dtype(np.int8)
    return np.dtype(np.int32)


def quantize(x: np.ndarray, qp: QuantParams) -> QuantTensor:
    """Round half to even, then clamp; the number of clamped elements is kept."""
    raw = np.rint(np.asarray(x, dtype=np.float64) * qp.scale + qp.zero_point)
    clamped = int(np.count_nonzero((raw < qp.qmin) | (raw > qp.qmax)))
    q = np.clip(raw, qp.qmin, qp.qmax).astype(_storage_dtype(qp))
    return QuantTensor(q, qp, clamped)


def dequantize(q: QuantTensor) -> np.ndarray:
    vals = (q.data.astype(np.float64) - q.qp.zero_point) / q.qp.scale
    return vals.astype(np.float32)


def quantize_weight(w: np.ndarray) -> QuantTensor:
    return quantize(w, weight_qparams(w))


# products are bounded by 255 * 127, so float32 partial sums stay exact for this many terms
_EXACT_F32_TERMS = (2 ** 24) // (255 * 127)
_CHUNK = 512


def integer_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact int32 product of small-integer matrices.

    Runs through float32 BLAS over inner-dimension chunks short enough that
    every partial sum is an exactly representable integer.
    """
    k = a.shape[-1]
    a32 = a.astype(np.float32)
    b32 = b.astype(np.float32)
    if k <= _EXACT_F32_TERMS:
        return np.matmul(a32, b32).astype(np.int32)
    acc = None
    for start in range(0, k, _CHUNK):
        part = np.matmul(a32[..., start:start + _CHUNK], b32[..., start:start + _CHUNK, :]).astype(np.int32)
        acc = part if acc is None else acc + part
    return acc


def quantized_linear(x: np.ndarray, w: QuantTensor, bias: np.ndarray | None = None) -> np.ndarray:
    """Dynamic int8 matmul: quantize ``x`` on the fly, accumulate in int32, add a float bias."""
    qx = quantize(x, dynamic_qparams(x))
    acc = integer_matmul(qx.data.astype(np.int32) - qx.qp.zero_point, w.data.astype(np.int32) - w.qp.zero_point)
    out = (acc / (qx.qp.scale * w.qp.scale)).astype(np.float32)
    if bias is not None:
        out += bias
    return out
