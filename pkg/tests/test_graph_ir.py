import numpy as np
import pytest

from fusegraph.errors import ValidationError
from fusegraph.graph_ir import Graph, Node, OpKind, ValueInfo, check, infer_shapes, parse_dim, topo_order, validate
from fusegraph.graph_ir.dims import Sym
from fusegraph.recipes import GraphBuilder
from fusegraph.tensor import DType

L = parse_dim("L")


def f32(*shape):
    return np.zeros(shape, np.float32)


def matmul_graph(w_shape=(8, 16)):
    return Graph(
        "mm",
        [ValueInfo("x", DType.F32, (L, 8))],
        ["y"],
        [Node("n0", OpKind.MatMul, ["x", "w"], ["y"])],
        {"w": f32(*w_shape)},
    )


def test_minimal_graph_is_valid():
    assert validate(matmul_graph()) == []


def test_cycle_is_reported_with_node_ids():
    g = Graph(
        "cyc",
        [ValueInfo("x", DType.F32, (L, 4))],
        ["b"],
        [Node("p", OpKind.Add, ["x", "b"], ["a"]), Node("q", OpKind.Relu, ["a"], ["b"])],
    )
    diags = validate(g)
    assert any(d.startswith("cycle through") and "p" in d and "q" in d for d in diags)
    with pytest.raises(ValidationError):
        topo_order(g)


def test_wrong_inner_dim_is_a_shape_diagnostic():
    diags = validate(matmul_graph((7, 16)))
    assert len(diags) == 1 and "n0" in diags[0] and "shape" in diags[0]


def test_all_violations_are_returned():
    g = Graph(
        "bad",
        [ValueInfo("x", DType.F32, (L, 4))],
        ["z"],
        [
            Node("a", OpKind.Relu, ["ghost"], ["y"]),
            Node("b", OpKind.Softmax, ["y"], ["z"]),  # missing axis
            Node("c", OpKind.Relu, ["x"], ["y"]),  # y produced twice
        ],
    )
    diags = validate(g)
    assert any("unresolved value ghost" in d for d in diags)
    assert any("axis" in d for d in diags)
    assert any("y" in d and "twice" in d or "duplicate" in d for d in diags)
    assert len(diags) >= 3


def test_matmul_shape_with_symbolic_length():
    g = infer_shapes(matmul_graph())
    assert g.value_info["y"].shape == (L, 16)


def test_split_into_three():
    g = Graph(
        "split",
        [ValueInfo("x", DType.F32, (L, 24))],
        ["a", "b", "c"],
        [Node("s", OpKind.Split, ["x"], ["a", "b", "c"], {"axis": 1, "split": [8, 8, 8]})],
    )
    info = infer_shapes(g).value_info
    assert [info[n].shape for n in "abc"] == [(L, 8)] * 3


def test_unfused_attention_subgraph_yields_l_by_d():
    b = GraphBuilder("att", np.random.default_rng(0))
    x = b.input("x", ["L", 16])
    out = b.self_attention(x, L, 16, 2, "att")
    g = infer_shapes(b.build([out]))
    assert g.value_info[out].shape == (L, 16)
    # the head split keeps L symbolic through Reshape and Transpose
    scores = [n for n in g.nodes if n.id.endswith("att.scores")][0]
    assert g.value_info[scores.outputs[0]].shape == (2, L, L)


def test_relative_positional_table_rows_are_affine_in_l():
    b = GraphBuilder("rel", np.random.default_rng(0))
    x = b.input("x", ["L", 8])
    pos = b.input("pos", ["2*L-1", 8])
    out = b.relpos_attention(x, pos, L, 8, 2, "att")
    g = infer_shapes(b.build([out]))
    assert g.value_info[out].shape == (L, 8)
    assert g.value_info["pos"].shape[0] == Sym("L", 2, -1)


def test_inconsistent_concrete_dims_name_the_node():
    g = Graph(
        "add",
        [ValueInfo("x", DType.F32, (3, 4))],
        ["y"],
        [Node("adder", OpKind.Add, ["x", "b"], ["y"])],
        {"b": f32(5)},
    )
    with pytest.raises(ValidationError, match="adder"):
        infer_shapes(g)


def test_infer_shapes_is_idempotent():
    once = infer_shapes(matmul_graph())
    assert infer_shapes(once).value_info == once.value_info


def _chain():
    return Graph(
        "chain",
        [ValueInfo("x", DType.F32, (2, 2))],
        ["c"],
        [Node("1", OpKind.Relu, ["x"], ["a"]), Node("2", OpKind.Relu, ["a"], ["b"]), Node("3", OpKind.Relu, ["b"], ["c"])],
    )


def test_topo_order_of_chain_is_unchanged():
    assert [n.id for n in topo_order(_chain())] == ["1", "2", "3"]


def test_diamond_tie_break_by_id():
    g = Graph(
        "diamond",
        [ValueInfo("x", DType.F32, (2, 2))],
        ["d"],
        [
            Node("d", OpKind.Add, ["vb", "vc"], ["d"]),
            Node("c", OpKind.Relu, ["va"], ["vc"]),
            Node("b", OpKind.Sigmoid, ["va"], ["vb"]),
            Node("a", OpKind.Relu, ["x"], ["va"]),
        ],
    )
    assert [n.id for n in topo_order(g)] == ["a", "b", "c", "d"]


def _replay_ok(g, order):
    ready = set(g.input_names()) | set(g.initializers)
    for n in order:
        if not all(i in ready for i in n.inputs):
            return False
        ready.update(n.outputs)
    return len(order) == len(g.nodes)


def test_random_permutation_still_orders(rng):
    from fusegraph.recipes import ModelRecipe, conformer_encoder

    g = conformer_encoder(ModelRecipe(architecture="conformer_encoder", blocks=1))
    for _ in range(5):
        shuffled = g.copy(nodes=[g.nodes[i] for i in rng.permutation(len(g.nodes))])
        check(shuffled)
        assert _replay_ok(shuffled, topo_order(shuffled))
        assert [n.id for n in topo_order(shuffled)] == [n.id for n in topo_order(g)]
