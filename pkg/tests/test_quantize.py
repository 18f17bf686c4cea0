import numpy as np
import pytest

from conftest import encoder_feeds, only_output
from fusegraph.fusion import fusion_pipeline
from fusegraph.graph_ir import Graph, Node, OpKind, ValueInfo, parse_dim, save_graphpack
from fusegraph.quantize import QUANT_PARAMS_BYTES, QuantTensor, dynamic_qparams, quantize_graph
from fusegraph.recipes import GraphBuilder, ModelRecipe, conformer_encoder, transformer_encoder
from fusegraph.tensor import DType
from oracles import manifest_parameter_bytes

L = parse_dim("L")


def _matmul_bytes(g):
    names = {n.inputs[1] for n in g.nodes if n.kind is OpKind.MatMul and n.inputs[1] in g.initializers}
    return sum(g.initializers[n].nbytes for n in names)


def test_transformer_ratio_at_most_045():
    g = transformer_encoder(ModelRecipe(blocks=2, d_model=64, heads=4))
    assert _matmul_bytes(g) / g.parameter_bytes() >= 0.9
    _, rep = quantize_graph(g)
    assert rep.ratio <= 0.45
    assert rep.nodes_quantized == {"QMatMul": 12}


def test_each_quantized_tensor_is_a_quarter_plus_params():
    g = transformer_encoder(ModelRecipe(blocks=1))
    q, rep = quantize_graph(g)
    for name in rep.tensors_quantized:
        t = q.initializers[name]
        assert isinstance(t, QuantTensor) and t.data.dtype == np.int8
        assert t.nbytes == g.initializers[name].nbytes // 4
    shrunk = sum(g.initializers[n].nbytes * 3 // 4 for n in rep.tensors_quantized)
    assert rep.quantized_bytes == rep.float_bytes - shrunk + QUANT_PARAMS_BYTES * len(rep.tensors_quantized)


@pytest.mark.parametrize("arch", ["transformer_encoder", "conformer_encoder"])
def test_report_bytes_match_the_manifest(tmp_path, arch):
    r = ModelRecipe(architecture=arch, blocks=1)
    g = transformer_encoder(r) if arch == "transformer_encoder" else conformer_encoder(r)
    fused = fusion_pipeline(g)[0]
    q, rep = quantize_graph(fused)
    save_graphpack(fused, tmp_path / "f.gp")
    save_graphpack(q, tmp_path / "q.gp")
    assert manifest_parameter_bytes(tmp_path / "f.gp") == rep.float_bytes
    assert manifest_parameter_bytes(tmp_path / "q.gp") == rep.quantized_bytes


def _conv_only():
    b = GraphBuilder("conv", np.random.default_rng(0))
    x = b.input("x", ["L", 8])
    return b.build([b.conv_module(x, 8, 3, "conv")])


def test_conv_only_graph_is_untouched():
    g = _conv_only()
    q, rep = quantize_graph(g)
    assert rep.nodes_quantized == {} and rep.ratio == 1.0
    assert [n.kind for n in q.nodes] == [n.kind for n in g.nodes]
    assert {s["kind"] for s in rep.skipped} == {"Conv1D"}
    assert all("float" in s["reason"] for s in rep.skipped)


def test_fused_kinds_are_rewritten():
    g, _ = fusion_pipeline(conformer_encoder(ModelRecipe(architecture="conformer_encoder", blocks=1)))
    q, rep = quantize_graph(g)
    (node,) = [n for n in q.nodes if n.kind is OpKind.QRelPosAttention]
    assert isinstance(q.initializers[node.inputs[2]], QuantTensor)
    assert isinstance(q.initializers[node.inputs[4]], QuantTensor)
    # biases and u/v stay float
    for slot in (3, 5, 6):
        assert q.initializers[node.inputs[slot]].dtype == np.float32
    assert not any(n.kind in (OpKind.FusedAttention, OpKind.FusedRelPosAttention, OpKind.MatMul) for n in q.nodes)


def test_bias_add_is_folded_into_the_quantized_node():
    b = GraphBuilder("lin", np.random.default_rng(0))
    x = b.input("x", ["L", 8])
    g = b.build([b.linear(x, 8, 4, "lin")])
    q, _ = quantize_graph(g)
    (node,) = q.nodes
    assert node.kind is OpKind.QMatMul and node.inputs[2] == "lin.bias"
    assert list(node.outputs) == g.outputs


def test_shared_weight_keeps_a_float_copy(rng):
    table = rng.standard_normal((6, 6)).astype(np.float32)
    g = Graph("tied", [ValueInfo("ids", DType.I32, (L,))], ["y"], [
        Node("a.embed", OpKind.Gather, ["emb", "ids"], ["e"], {"axis": 0}),
        Node("b.proj", OpKind.MatMul, ["e", "emb"], ["y"]),
    ], {"emb": table})
    q, rep = quantize_graph(g)
    assert q.initializers["emb"].dtype == np.float32
    assert rep.tensors_quantized == ["emb.int8"]
    assert q.nodes[1].inputs[1] == "emb.int8"
    ids = np.array([0, 3, 5], np.int32)
    ref, got = only_output(g, {"ids": ids}), only_output(q, {"ids": ids})
    assert np.max(np.abs(got - ref)) <= 0.02 * np.max(np.abs(ref))


def test_qmatmul_relative_error_within_two_percent(rng):
    b = GraphBuilder("lin", rng)
    x = b.input("x", ["L", 64])
    g = b.build([b.linear(x, 64, 64, "lin")])
    q, _ = quantize_graph(g)
    for _ in range(20):
        feeds = {"x": rng.standard_normal((16, 64)).astype(np.float32)}
        ref, got = only_output(g, feeds), only_output(q, feeds)
        assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) <= 0.02


def test_quantized_encoder_stays_close(rng):
    r = ModelRecipe(blocks=2)
    g = transformer_encoder(r)
    q, _ = quantize_graph(g)
    feeds = encoder_feeds(r, 12, rng)
    ref, got = only_output(g, feeds), only_output(q, feeds)
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) <= 0.05
    assert np.max(np.abs(got - ref)) > 1e-5  # quantization is not a no-op


def test_argmax_agreement_on_well_separated_logits():
    rng = np.random.default_rng(5)
    b = GraphBuilder("head", rng)
    x = b.input("x", ["L", 32])
    g = b.build([b.linear(x, 32, 10, "cls")])
    q, _ = quantize_graph(g)
    agree = total = 0
    while total < 300:
        xs = rng.standard_normal((1, 32)).astype(np.float32)
        ref = only_output(g, {"x": xs})[0]
        top = np.sort(ref)
        if top[-1] - top[-2] < 10.0 / dynamic_qparams(xs).scale:
            continue
        total += 1
        agree += int(np.argmax(only_output(q, {"x": xs})[0]) == np.argmax(ref))
    assert agree / total >= 0.99
