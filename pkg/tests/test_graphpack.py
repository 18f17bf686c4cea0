import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusegraph.errors import FormatError, IntegrityError
from fusegraph.fusion import fusion_pipeline
from fusegraph.graph_ir import (
    Graph,
    Node,
    OpKind,
    ValueInfo,
    graphs_equal,
    load_graphpack,
    parse_dim,
    read_pack,
    save_graphpack,
    write_pack,
)
from fusegraph.graph_ir.graphpack import dumps, loads
from fusegraph.quantize import quantize_graph
from fusegraph.recipes import ARCHITECTURES, ModelRecipe, generate, transformer_encoder
from fusegraph.tensor import DType


def _attention_graph():
    return transformer_encoder(ModelRecipe(blocks=1))


def _rewrite_manifest(data, edit):
    (mlen,) = struct.unpack_from("<Q", data, 8)
    manifest = json.loads(data[16:16 + mlen])
    edit(manifest)
    blob_start = 16 + mlen + (-(16 + mlen)) % 8
    (blen,) = struct.unpack_from("<Q", data, blob_start)
    blob = data[blob_start + 8:]
    text = json.dumps(manifest).encode()
    out = b"GRAPHPK\n" + struct.pack("<Q", len(text)) + text + b"\0" * ((-(16 + len(text))) % 8)
    return out + struct.pack("<Q", blen) + blob


def test_round_trip_is_structural_and_bitwise(tmp_path):
    g = _attention_graph()
    save_graphpack(g, tmp_path / "g.gp")
    back = load_graphpack(tmp_path / "g.gp")
    assert graphs_equal(g, back)


def test_quantized_round_trip(tmp_path):
    q, _ = quantize_graph(fusion_pipeline(_attention_graph())[0])
    save_graphpack(q, tmp_path / "q.gp")
    assert graphs_equal(q, load_graphpack(tmp_path / "q.gp"))


def test_initializers_are_aligned():
    data = dumps(generate(ModelRecipe(architecture="conformer_encoder", blocks=1)))
    (mlen,) = struct.unpack_from("<Q", data, 8)
    manifest = json.loads(data[16:16 + mlen])
    assert (16 + mlen + (-(16 + mlen)) % 8) % 8 == 0
    for e in manifest["graphs"][0]["initializers"]:
        assert e["offset"] % 8 == 0


def test_truncated_blob_reports_lengths(tmp_path):
    path = tmp_path / "g.gp"
    save_graphpack(_attention_graph(), path)
    data = path.read_bytes()
    with pytest.raises(IntegrityError, match=r"expected (\d+) bytes, found (\d+)") as err:
        loads(data[:-1])
    expected, found = map(int, err.value.args[0].split("expected ")[1].split(" bytes, found "))
    assert expected - found == 1


def test_offset_beyond_blob(tmp_path):
    data = dumps(generate(ModelRecipe(blocks=1)))

    def push(manifest):
        manifest["graphs"][0]["initializers"][0]["offset"] = 1 << 40

    with pytest.raises(IntegrityError, match="outside blob"):
        loads(_rewrite_manifest(data, push))


def test_length_must_match_dtype_times_count():
    data = dumps(generate(ModelRecipe(blocks=1)))

    def shrink(manifest):
        manifest["graphs"][0]["initializers"][0]["length"] -= 4

    with pytest.raises(IntegrityError):
        loads(_rewrite_manifest(data, shrink))


def test_unknown_op_kind_is_a_format_version_error():
    data = dumps(generate(ModelRecipe(blocks=1)))

    def alien(manifest):
        manifest["graphs"][0]["nodes"][0]["op"] = "Gelu"

    with pytest.raises(FormatError, match="format version 1"):
        loads(_rewrite_manifest(data, alien))


def test_newer_format_version_rejected():
    data = dumps(generate(ModelRecipe(blocks=1)))

    def bump(manifest):
        manifest["format_version"] = 2

    with pytest.raises(FormatError, match="version"):
        loads(_rewrite_manifest(data, bump))


def test_bad_magic():
    with pytest.raises(FormatError):
        loads(b"PK\x03\x04 not a graphpack")


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_staged_packs_keep_roles_and_metadata(tmp_path, arch):
    pack = generate(ModelRecipe(architecture=arch, blocks=1))
    write_pack(pack, tmp_path / "p.gp")
    back = read_pack(tmp_path / "p.gp")
    assert back.roles == pack.roles and back.metadata == pack.metadata
    assert list(back.graphs) == list(pack.graphs)
    assert all(graphs_equal(pack.graphs[k], back.graphs[k]) for k in pack.graphs)


_UNARY = [OpKind.Relu, OpKind.Sigmoid, OpKind.Sqrt]


@st.composite
def random_graphs(draw):
    """Random DAGs of elementwise, matmul and softmax nodes over an (L, D) input."""
    d = draw(st.integers(1, 6))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    values = ["x"]
    nodes, inits = [], {}
    for i in range(draw(st.integers(1, 12))):
        choice = draw(st.sampled_from(["unary", "add", "matmul", "softmax", "const_mul"]))
        a = draw(st.sampled_from(values))
        out = f"v{i}"
        if choice == "unary":
            nodes.append(Node(f"n{i:03d}", draw(st.sampled_from(_UNARY)), [a], [out]))
        elif choice == "add":
            nodes.append(Node(f"n{i:03d}", OpKind.Add, [a, draw(st.sampled_from(values))], [out]))
        elif choice == "matmul":
            inits[f"w{i}"] = rng.standard_normal((d, d)).astype(np.float32)
            nodes.append(Node(f"n{i:03d}", OpKind.MatMul, [a, f"w{i}"], [out]))
        elif choice == "softmax":
            nodes.append(Node(f"n{i:03d}", OpKind.Softmax, [a], [out], {"axis": -1}))
        else:
            inits[f"c{i}"] = np.array(rng.standard_normal(), np.float32)
            nodes.append(Node(f"n{i:03d}", OpKind.Mul, [a, f"c{i}"], [out]))
        values.append(out)
    return Graph("random", [ValueInfo("x", DType.F32, (parse_dim("L"), d))], [values[-1]], nodes, inits)


@settings(max_examples=60, deadline=None)
@given(random_graphs())
def test_load_save_identity_on_random_graphs(g):
    assert graphs_equal(g, loads(dumps_one(g)).single())


def dumps_one(g):
    from fusegraph.graph_ir import Pack

    return dumps(Pack({g.name: g}))
