"""Benchmark and verification harness shared by the CLI and the acceptance tests."""

from __future__ import annotations

import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, SignatureError
from .executor import Session
from .fusion import fusion_pipeline
from .graph_ir import Graph, OpKind
from .graph_ir.dims import Sym, evaluate, symbols
from .quantize import quantize_graph
from .tensor import DType

SCHEMA = "fusegraph.bench"
SCHEMA_VERSION = 1
CONFIGS = ("baseline", "fused", "quantized", "fused+quantized")


def random_inputs(g: Graph, length: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Seeded inputs for ``g`` with every symbolic dim bound to ``length``.

    Integer inputs that index a Gather table are drawn inside the table.
    """
    env = {name: length for v in g.inputs for name in symbols(v.shape)}
    bounds: dict[str, int] = {}
    for n in g.nodes:
        if n.kind is OpKind.Gather and n.inputs[0] in g.initializers:
            rows = g.initializers[n.inputs[0]].shape[0]
            bounds[n.inputs[1]] = min(bounds.get(n.inputs[1], rows), rows)
    feeds = {}
    for v in g.inputs:
        shape = [evaluate(d, env) if isinstance(d, Sym) else d for d in v.shape]
        if v.dtype is DType.F32:
            feeds[v.name] = rng.standard_normal(shape).astype(np.float32)
        else:
            feeds[v.name] = rng.integers(0, bounds.get(v.name, 1), size=shape).astype(v.dtype.numpy)
    return feeds


def signature(g: Graph) -> list[tuple]:
    return [(v.name, v.dtype.value, tuple(str(d) for d in v.shape)) for v in g.inputs]


@dataclass
class VerifyReport:
    trials: int
    tol: float
    max_abs: float
    max_rel: float
    passed: bool
    per_output: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def verify(a: Graph, b: Graph, trials: int = 10, tol: float = 1e-5, seed: int = 0, length: int = 8,
           workers: Optional[int] = None) -> VerifyReport:
    """Run both graphs on the same seeded inputs and compare every output by position."""
    if signature(a) != signature(b):
        raise SignatureError(f"input signatures differ: {signature(a)} vs {signature(b)}")
    if len(a.outputs) != len(b.outputs):
        raise SignatureError(f"output counts differ: {len(a.outputs)} vs {len(b.outputs)}")
    rng = np.random.default_rng(seed)
    max_abs = max_rel = 0.0
    per_output = {name: 0.0 for name in a.outputs}
    with Session(a, workers) as sa, Session(b, workers) as sb:
        for _ in range(trials):
            feeds = random_inputs(a, length, rng)
            out_a, _ = sa.run(feeds)
            out_b, _ = sb.run(feeds)
            for name_a, name_b in zip(a.outputs, b.outputs):
                x = np.asarray(out_a[name_a], dtype=np.float64)
                y = np.asarray(out_b[name_b], dtype=np.float64)
                diff = float(np.max(np.abs(x - y))) if x.size else 0.0
                scale = float(np.max(np.abs(x))) if x.size else 0.0
                per_output[name_a] = max(per_output[name_a], diff)
                max_abs = max(max_abs, diff)
                max_rel = max(max_rel, diff / scale if scale else diff)
    return VerifyReport(trials, tol, max_abs, max_rel, max_abs <= tol, per_output)


@dataclass
class ConfigResult:
    runs: int
    seconds: list[float]
    rtf_mean: float
    rtf_std: float
    rtf_median: float
    peak_bytes: int
    parameter_bytes: int
    node_count: int
    workers: int


@dataclass
class BenchReport:
    model: str
    length: int
    frame_shift_ms: float
    audio_seconds: float
    configs: dict[str, ConfigResult]
    environment: dict = field(default_factory=dict)
    schema: str = SCHEMA
    version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "BenchReport":
        if d.get("schema") != SCHEMA or d.get("version") != SCHEMA_VERSION:
            raise FormatError(f"not a {SCHEMA} v{SCHEMA_VERSION} report")
        body = dict(d)
        body["configs"] = {k: ConfigResult(**v) for k, v in d["configs"].items()}
        return cls(**body)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls.from_dict(json.loads(text))

    def deterministic_fields(self) -> dict:
        """Everything except wall-clock measurements."""
        return {
            name: {"runs": c.runs, "peak_bytes": c.peak_bytes, "parameter_bytes": c.parameter_bytes,
                   "node_count": c.node_count, "workers": c.workers}
            for name, c in self.configs.items()
        }


def variants(g: Graph, names: Sequence[str] = CONFIGS) -> dict[str, Graph]:
    out: dict[str, Graph] = {}
    fused = fusion_pipeline(g)[0] if any("fused" in n for n in names) else None
    for name in names:
        if name == "baseline":
            out[name] = g
        elif name == "fused":
            out[name] = fused
        elif name == "quantized":
            out[name] = quantize_graph(g)[0]
        elif name == "fused+quantized":
            out[name] = quantize_graph(fused)[0]
        else:
            raise FormatError(f"unknown bench configuration {name!r}; choose from {', '.join(CONFIGS)}")
    return out


def time_graph(g: Graph, feeds: Mapping[str, np.ndarray], runs: int, workers: int) -> tuple[list[float], int]:
    """One discarded warm-up, then ``runs`` timed runs on a monotonic clock."""
    with Session(g, workers) as s:
        s.run(feeds)
        seconds = []
        peak = 0
        for _ in range(runs):
            t0 = time.perf_counter()
            _, stats = s.run(feeds)
            seconds.append(time.perf_counter() - t0)
            peak = max(peak, stats.peak_bytes)
    return seconds, peak


def bench(g: Graph, runs: int = 10, frame_shift_ms: float = 10.0, workers: int = 1, length: int = 64,
          seed: int = 0, configs: Sequence[str] = CONFIGS) -> BenchReport:
    """The baseline always runs sequentially; the other configurations use ``workers``."""
    if runs < 10:
        raise ConfigError(f"bench needs at least 10 timed runs, got {runs}")
    if frame_shift_ms <= 0:
        raise ConfigError("frame shift must be positive")
    feeds = random_inputs(g, length, np.random.default_rng(seed))
    audio = length * frame_shift_ms / 1000.0
    results = {}
    for name, graph in variants(g, configs).items():
        w = 1 if name == "baseline" else workers
        seconds, peak = time_graph(graph, feeds, runs, w)
        rtf = [s / audio for s in seconds]
        results[name] = ConfigResult(
            runs=runs,
            seconds=seconds,
            rtf_mean=statistics.fmean(rtf),
            rtf_std=statistics.stdev(rtf),
            rtf_median=statistics.median(rtf),
            peak_bytes=peak,
            parameter_bytes=graph.parameter_bytes(),
            node_count=len(graph.nodes),
            workers=w,
        )
    env = {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "cpus": os.cpu_count(),
    }
    return BenchReport(g.name, length, frame_shift_ms, audio, results, env)
