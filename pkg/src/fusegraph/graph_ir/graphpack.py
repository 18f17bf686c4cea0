"""GraphPack: a JSON manifest plus one little-endian weight blob in a single file.

Layout (all integers little-endian u64)::

    b"GRAPHPK\\n" | manifest_len | manifest (UTF-8 JSON) | pad to 8 | blob_len | blob

Every initializer occupies ``[offset, offset + length)`` of the blob with
``offset`` 8-byte aligned. Quantized initializers are stored as I8 with their
scale and zero point in the manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import FormatError, IntegrityError
from ..qtensor import QuantParams, QuantTensor
from ..tensor import DType
from .analysis import check
from .dims import dim_to_json, parse_dim
from .ir import Graph, Node, OpKind, ValueInfo

MAGIC = b"GRAPHPK\n"
FORMAT_VERSION = 1
ALIGN = 8
_U64 = struct.Struct("<Q")


@dataclass
class Pack:
    """Graphs keyed by role (or by graph name when no role applies) plus free-form metadata."""

    graphs: dict[str, Graph]
    roles: bool = False
    metadata: dict[str, Any] = field(default_factory=dict)

    def single(self) -> Graph:
        if len(self.graphs) != 1:
            raise FormatError(f"expected one graph, file holds {len(self.graphs)}: {sorted(self.graphs)}")
        return next(iter(self.graphs.values()))


def _pad(n: int) -> int:
    return (-n) % ALIGN


def _graph_manifest(g: Graph, role: str | None, blob: bytearray) -> dict:
    inits = []
    for name, value in g.initializers.items():
        if isinstance(value, QuantTensor):
            data = np.require(value.data, np.int8, "C")
            entry_quant = {
                "scale": value.qp.scale,
                "zero_point": value.qp.zero_point,
                "qmin": value.qp.qmin,
                "qmax": value.qp.qmax,
            }
        else:
            data = np.asarray(value, order="C")
            entry_quant = None
        dtype = DType.of(data)
        raw = data.astype(dtype.numpy, copy=False).tobytes()
        blob.extend(b"\0" * _pad(len(blob)))
        entry = {
            "name": name,
            "dtype": dtype.value,
            "shape": list(data.shape),
            "offset": len(blob),
            "length": len(raw),
        }
        if entry_quant is not None:
            entry["quant"] = entry_quant
        blob.extend(raw)
        inits.append(entry)
    return {
        "name": g.name,
        "role": role,
        "inputs": [
            {"name": v.name, "dtype": v.dtype.value, "shape": [dim_to_json(d) for d in v.shape]}
            for v in g.inputs
        ],
        "outputs": list(g.outputs),
        "nodes": [
            {"id": n.id, "op": n.kind.value, "inputs": list(n.inputs), "outputs": list(n.outputs), "attrs": n.attrs}
            for n in g.nodes
        ],
        "initializers": inits,
    }


def dumps(pack: Pack) -> bytes:
    blob = bytearray()
    graphs = []
    for key, g in pack.graphs.items():
        check(g)
        graphs.append(_graph_manifest(g, key if pack.roles else None, blob))
    manifest = {
        "format": "graphpack",
        "format_version": FORMAT_VERSION,
        "graphs": graphs,
        "metadata": pack.metadata,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC)
    out += _U64.pack(len(text)) + text + b"\0" * _pad(len(MAGIC) + _U64.size + len(text))
    out += _U64.pack(len(blob)) + blob
    return bytes(out)


def split_file(data: bytes) -> tuple[dict, bytes]:
    """Return (manifest, blob), checking the framing but not the initializer table."""
    if not data.startswith(MAGIC):
        raise FormatError("not a GraphPack file (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + _U64.size:
        raise IntegrityError("truncated header")
    (mlen,) = _U64.unpack_from(data, pos)
    pos += _U64.size
    if len(data) < pos + mlen:
        raise IntegrityError(f"truncated manifest: expected {mlen} bytes, found {len(data) - pos}")
    try:
        manifest = json.loads(data[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from None
    pos += mlen + _pad(pos + mlen)
    if len(data) < pos + _U64.size:
        raise IntegrityError("truncated blob header")
    (blen,) = _U64.unpack_from(data, pos)
    pos += _U64.size
    actual = len(data) - pos
    if actual != blen:
        raise IntegrityError(f"blob length mismatch: expected {blen} bytes, found {actual}")
    return manifest, data[pos:]


def _load_initializer(entry: dict, blob: bytes):
    try:
        dtype = DType(entry["dtype"])
    except ValueError:
        raise FormatError(f"unknown dtype {entry['dtype']!r} for initializer {entry['name']}") from None
    shape = tuple(int(d) for d in entry["shape"])
    offset, length = int(entry["offset"]), int(entry["length"])
    count = int(np.prod(shape, dtype=np.int64))
    if length != count * dtype.itemsize:
        raise IntegrityError(
            f"initializer {entry['name']}: length {length} != {count} x {dtype.itemsize} bytes"
        )
    if offset < 0 or offset % ALIGN or offset + length > len(blob):
        raise IntegrityError(
            f"initializer {entry['name']}: range [{offset}, {offset + length}) outside blob of {len(blob)} bytes"
        )
    arr = np.frombuffer(blob, dtype=dtype.numpy, count=count, offset=offset).reshape(shape).copy()
    quant = entry.get("quant")
    if quant is None:
        return arr
    if dtype is not DType.I8:
        raise FormatError(f"quantized initializer {entry['name']} must be I8")
    qp = QuantParams(float(quant["scale"]), int(quant["zero_point"]), int(quant["qmin"]), int(quant["qmax"]))
    return QuantTensor(arr, qp)


def _load_graph(spec: dict, blob: bytes) -> Graph:
    nodes = []
    for n in spec["nodes"]:
        try:
            kind = OpKind(n["op"])
        except ValueError:
            raise FormatError(
                f"unknown op kind {n['op']!r} in node {n['id']} (format version {FORMAT_VERSION})"
            ) from None
        nodes.append(Node(n["id"], kind, n["inputs"], n["outputs"], n.get("attrs", {})))
    inputs = [
        ValueInfo(v["name"], DType(v["dtype"]), tuple(parse_dim(d) for d in v["shape"])) for v in spec["inputs"]
    ]
    inits = {e["name"]: _load_initializer(e, blob) for e in spec["initializers"]}
    return Graph(spec["name"], inputs, list(spec["outputs"]), nodes, inits)


def loads(data: bytes) -> Pack:
    manifest, blob = split_file(data)
    if manifest.get("format") != "graphpack":
        raise FormatError("manifest is not a graphpack manifest")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version!r} (this build reads {FORMAT_VERSION})")
    graphs: dict[str, Graph] = {}
    roles = False
    for spec in manifest["graphs"]:
        g = _load_graph(spec, blob)
        key = spec.get("role") or g.name
        roles = roles or spec.get("role") is not None
        graphs[key] = g
    return Pack(graphs, roles, manifest.get("metadata") or {})


def write_pack(pack: Pack, path: str | Path) -> None:
    Path(path).write_bytes(dumps(pack))


def read_pack(path: str | Path) -> Pack:
    return loads(Path(path).read_bytes())


def save_graphpack(g: Graph, path: str | Path) -> None:
    write_pack(Pack({g.name: g}), path)


def load_graphpack(path: str | Path) -> Graph:
    return read_pack(path).single()

