"""Graph interpreters and attention kernels."""

from .kernels import (
    attention_forward,
    fused_attention_forward,
    qmatmul_forward,
    relpos_attention_forward,
    skew_relative,
)
from .session import WORKERS_ENV, RunStats, Session, default_workers, run

__all__ = [
    "RunStats",
    "Session",
    "WORKERS_ENV",
    "attention_forward",
    "default_workers",
    "fused_attention_forward",
    "qmatmul_forward",
    "relpos_attention_forward",
    "run",
    "skew_relative",
]
