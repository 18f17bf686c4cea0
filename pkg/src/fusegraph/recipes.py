"""Seeded synthetic models built from primitive ops.

Every attention, relative-position attention and layer-norm block is
emitted as the explicit primitive subgraph an exporter would produce, so
the fusion passes have something real to find.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .graph_ir import SLICE_END, Graph, Node, OpKind, Pack, ValueInfo, check
from .graph_ir.dims import Dim, dim_to_json, parse_dim
from .tensor import DType

ARCHITECTURES = ("transformer_encoder", "conformer_encoder", "encoder_decoder_asr", "ar_tts")
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelRecipe:
    architecture: str = "transformer_encoder"
    blocks: int = 2
    d_model: int = 16
    heads: int = 2
    length: int = 8
    vocab: int = 8
    seed: int = 0
    ffn_mult: int = 4
    conv_kernel: int = 7
    dec_layers: int = 1
    n_mels: int = 8
    max_steps: int = 32

    def validate(self) -> "ModelRecipe":
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; choose from {', '.join(ARCHITECTURES)}")
        for name in ("blocks", "d_model", "heads", "length", "vocab", "ffn_mult", "dec_layers", "n_mels", "max_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd and positive, got {self.conv_kernel}")
        if self.architecture == "encoder_decoder_asr" and self.vocab < 3:
            raise ConfigError("encoder_decoder_asr needs vocab >= 3 (blank, one symbol, sos/eos)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class GraphBuilder:
    """Appends nodes with zero-padded sequential ids, so id order is creation order."""

    def __init__(self, name: str, rng: np.random.Generator):
        self.name = name
        self.rng = rng
        self.inputs: list[ValueInfo] = []
        self.nodes: list[Node] = []
        self.initializers: dict[str, np.ndarray] = {}
        self._count = 0

    # values ---------------------------------------------------------------
    def input(self, name: str, shape, dtype: DType = DType.F32) -> str:
        self.inputs.append(ValueInfo(name, dtype, tuple(parse_dim(d) for d in shape)))
        return name

    def const(self, name: str, value, dtype: DType = DType.F32) -> str:
        if name in self.initializers:
            raise ValueError(f"duplicate initializer {name}")
        self.initializers[name] = np.require(value, dtype.numpy, "C")
        return name

    def weight(self, name: str, shape, std: float) -> str:
        return self.const(name, self.rng.standard_normal(shape) * std)

    def scalar(self, name: str, value: float) -> str:
        return self.const(name, np.array(value, dtype=np.float32))

    def node(self, kind: OpKind, inputs, label: str, attrs: Optional[dict] = None, outputs: int = 1):
        self._count += 1
        nid = f"n{self._count:05d}.{label}"
        outs = [nid] if outputs == 1 else [f"{nid}:{i}" for i in range(outputs)]
        self.nodes.append(Node(nid, kind, tuple(inputs), tuple(outs), dict(attrs or {})))
        return outs[0] if outputs == 1 else outs

    def build(self, outputs: list[str]) -> Graph:
        return check(Graph(self.name, list(self.inputs), list(outputs), list(self.nodes), dict(self.initializers)))

    # layers ---------------------------------------------------------------
    def linear(self, x: str, d_in: int, d_out: int, prefix: str, bias: bool = True) -> str:
        w = self.weight(f"{prefix}.weight", (d_in, d_out), 1.0 / math.sqrt(d_in))
        y = self.node(OpKind.MatMul, [x, w], f"{prefix}.matmul")
        if not bias:
            return y
        b = self.weight(f"{prefix}.bias", (d_out,), 0.1)
        return self.node(OpKind.Add, [y, b], f"{prefix}.add")

    def layer_norm(self, x: str, d: int, prefix: str) -> str:
        gamma = self.const(f"{prefix}.gamma", 1.0 + 0.1 * self.rng.standard_normal(d))
        beta = self.const(f"{prefix}.beta", 0.1 * self.rng.standard_normal(d))
        two = self.scalar(f"{prefix}.pow_exponent", 2.0)
        eps = self.scalar(f"{prefix}.eps", LN_EPS)
        mean = self.node(OpKind.ReduceMean, [x], f"{prefix}.mean", {"axes": [-1], "keepdims": 1})
        centered = self.node(OpKind.Sub, [x, mean], f"{prefix}.sub")
        sq = self.node(OpKind.Pow, [centered, two], f"{prefix}.pow")
        var = self.node(OpKind.ReduceMean, [sq], f"{prefix}.var", {"axes": [-1], "keepdims": 1})
        var_eps = self.node(OpKind.Add, [var, eps], f"{prefix}.add_eps")
        std = self.node(OpKind.Sqrt, [var_eps], f"{prefix}.sqrt")
        normed = self.node(OpKind.Div, [centered, std], f"{prefix}.div")
        scaled = self.node(OpKind.Mul, [normed, gamma], f"{prefix}.mul_gamma")
        return self.node(OpKind.Add, [scaled, beta], f"{prefix}.add_beta")

    def _heads(self, x: str, length: Dim, heads: int, dk: int, perm: list[int], prefix: str) -> str:
        r = self.node(OpKind.Reshape, [x], f"{prefix}.reshape", {"shape": [dim_to_json(length), heads, dk]})
        return self.node(OpKind.Transpose, [r], f"{prefix}.transpose", {"perm": perm})

    def _merge_heads(self, ctx: str, length: Dim, d: int, prefix: str) -> str:
        t = self.node(OpKind.Transpose, [ctx], f"{prefix}.merge_transpose", {"perm": [1, 0, 2]})
        return self.node(OpKind.Reshape, [t], f"{prefix}.merge_reshape", {"shape": [dim_to_json(length), d]})

    def attention_core(self, q, k, v, q_len: Dim, kv_len: Dim, d: int, heads: int, prefix: str, mask=None):
        """Scaled dot-product attention over already projected (len, D) tensors."""
        dk = d // heads
        qh = self._heads(q, q_len, heads, dk, [1, 0, 2], f"{prefix}.q")
        kh = self._heads(k, kv_len, heads, dk, [1, 2, 0], f"{prefix}.k")
        vh = self._heads(v, kv_len, heads, dk, [1, 0, 2], f"{prefix}.v")
        scores = self.node(OpKind.MatMul, [qh, kh], f"{prefix}.scores")
        scaled = self.node(OpKind.Div, [scores, self.scalar(f"{prefix}.sqrt_dk", math.sqrt(dk))], f"{prefix}.scale")
        if mask is not None:
            scaled = self.node(OpKind.Add, [scaled, mask], f"{prefix}.mask")
        probs = self.node(OpKind.Softmax, [scaled], f"{prefix}.softmax", {"axis": -1})
        ctx = self.node(OpKind.MatMul, [probs, vh], f"{prefix}.context")
        return self._merge_heads(ctx, q_len, d, prefix)

    def self_attention(self, x: str, length: Dim, d: int, heads: int, prefix: str, mask=None) -> str:
        """Q/K/V projections plus attention core; the output projection is separate."""
        q = self.linear(x, d, d, f"{prefix}.q_proj")
        k = self.linear(x, d, d, f"{prefix}.k_proj")
        v = self.linear(x, d, d, f"{prefix}.v_proj")
        return self.attention_core(q, k, v, length, length, d, heads, prefix, mask)

    def relpos_attention(self, x: str, pos_emb: str, length: Dim, d: int, heads: int, prefix: str, mask=None):
        dk = d // heads
        L = dim_to_json(length)
        two_l = dim_to_json(length * 2)
        rows = dim_to_json(length * 2 - 1)
        q = self.linear(x, d, d, f"{prefix}.q_proj")
        k = self.linear(x, d, d, f"{prefix}.k_proj")
        v = self.linear(x, d, d, f"{prefix}.v_proj")
        p = self.linear(pos_emb, d, d, f"{prefix}.pos_proj", bias=False)
        u = self.weight(f"{prefix}.pos_bias_u", (heads, dk), 0.5)
        vb = self.weight(f"{prefix}.pos_bias_v", (heads, dk), 0.5)

        q_r = self.node(OpKind.Reshape, [q], f"{prefix}.q.reshape", {"shape": [L, heads, dk]})
        q_u = self.node(OpKind.Add, [q_r, u], f"{prefix}.q.add_u")
        q_u = self.node(OpKind.Transpose, [q_u], f"{prefix}.q_u.transpose", {"perm": [1, 0, 2]})
        q_v = self.node(OpKind.Add, [q_r, vb], f"{prefix}.q.add_v")
        q_v = self.node(OpKind.Transpose, [q_v], f"{prefix}.q_v.transpose", {"perm": [1, 0, 2]})
        kh = self._heads(k, length, heads, dk, [1, 2, 0], f"{prefix}.k")
        vh = self._heads(v, length, heads, dk, [1, 0, 2], f"{prefix}.v")
        ph = self._heads(p, length * 2 - 1, heads, dk, [1, 2, 0], f"{prefix}.p")

        ac = self.node(OpKind.MatMul, [q_u, kh], f"{prefix}.matrix_ac")
        bd = self.node(OpKind.MatMul, [q_v, ph], f"{prefix}.matrix_bd")
        # relative shift: pad one zero column, fold, drop a row, unfold, keep L columns
        bd = self.node(OpKind.Pad, [bd], f"{prefix}.shift.pad", {"pads": [0, 0, 1, 0, 0, 0]})
        bd = self.node(OpKind.Reshape, [bd], f"{prefix}.shift.fold", {"shape": [heads, two_l, L]})
        bd = self.node(OpKind.Slice, [bd], f"{prefix}.shift.drop", {"starts": [1], "ends": [SLICE_END], "axes": [1]})
        bd = self.node(OpKind.Reshape, [bd], f"{prefix}.shift.unfold", {"shape": [heads, L, rows]})
        bd = self.node(OpKind.Slice, [bd], f"{prefix}.shift.keep", {"starts": [0], "ends": [L], "axes": [2]})

        logits = self.node(OpKind.Add, [ac, bd], f"{prefix}.ac_plus_bd")
        scaled = self.node(OpKind.Div, [logits, self.scalar(f"{prefix}.sqrt_dk", math.sqrt(dk))], f"{prefix}.scale")
        if mask is not None:
            scaled = self.node(OpKind.Add, [scaled, mask], f"{prefix}.mask")
        probs = self.node(OpKind.Softmax, [scaled], f"{prefix}.softmax", {"axis": -1})
        ctx = self.node(OpKind.MatMul, [probs, vh], f"{prefix}.context")
        return self._merge_heads(ctx, length, d, prefix)

    def feed_forward(self, x: str, d: int, hidden: int, prefix: str) -> str:
        h = self.linear(x, d, hidden, f"{prefix}.w1")
        h = self.node(OpKind.Relu, [h], f"{prefix}.relu")
        return self.linear(h, hidden, d, f"{prefix}.w2")

    def conv(self, x: str, c_in: int, c_out: int, k: int, groups: int, prefix: str) -> str:
        w = self.weight(f"{prefix}.weight", (c_out, c_in // groups, k), 1.0 / math.sqrt(c_in // groups * k))
        b = self.weight(f"{prefix}.bias", (c_out,), 0.1)
        pad = (k - 1) // 2
        return self.node(OpKind.Conv1D, [x, w, b], f"{prefix}.conv", {"pads": [pad, pad], "groups": groups})

    def swish(self, x: str, prefix: str) -> str:
        s = self.node(OpKind.Sigmoid, [x], f"{prefix}.sigmoid")
        return self.node(OpKind.Mul, [x, s], f"{prefix}.swish")

    def conv_module(self, x: str, d: int, kernel: int, prefix: str) -> str:
        h = self.conv(x, d, 2 * d, 1, 1, f"{prefix}.pointwise1")
        a, b = self.node(OpKind.Split, [h], f"{prefix}.glu_split", {"axis": 1, "split": [d, d]}, outputs=2)
        gate = self.node(OpKind.Sigmoid, [b], f"{prefix}.glu_sigmoid")
        h = self.node(OpKind.Mul, [a, gate], f"{prefix}.glu")
        h = self.conv(h, d, d, kernel, d, f"{prefix}.depthwise")
        h = self.swish(h, prefix)
        return self.conv(h, d, d, 1, 1, f"{prefix}.pointwise2")


# encoders -----------------------------------------------------------------

def transformer_block(b: GraphBuilder, x: str, length: Dim, r: ModelRecipe, prefix: str, mask=None) -> str:
    d = r.d_model
    h = b.layer_norm(x, d, f"{prefix}.norm1")
    h = b.self_attention(h, length, d, r.heads, f"{prefix}.attn", mask)
    h = b.linear(h, d, d, f"{prefix}.attn.out_proj")
    x = b.node(OpKind.Add, [x, h], f"{prefix}.residual1")
    h = b.layer_norm(x, d, f"{prefix}.norm2")
    h = b.feed_forward(h, d, d * r.ffn_mult, f"{prefix}.ff")
    return b.node(OpKind.Add, [x, h], f"{prefix}.residual2")


def conformer_block(b: GraphBuilder, x: str, pos: str, length: Dim, r: ModelRecipe, prefix: str) -> str:
    d = r.d_model
    half = b.scalar(f"{prefix}.half_step", 0.5)

    def macaron(x: str, name: str) -> str:
        h = b.layer_norm(x, d, f"{prefix}.{name}.norm")
        h = b.feed_forward(h, d, d * r.ffn_mult, f"{prefix}.{name}")
        h = b.node(OpKind.Mul, [h, half], f"{prefix}.{name}.half")
        return b.node(OpKind.Add, [x, h], f"{prefix}.{name}.residual")

    x = macaron(x, "ff_macaron")
    h = b.layer_norm(x, d, f"{prefix}.attn.norm")
    h = b.relpos_attention(h, pos, length, d, r.heads, f"{prefix}.attn")
    h = b.linear(h, d, d, f"{prefix}.attn.out_proj")
    x = b.node(OpKind.Add, [x, h], f"{prefix}.attn.residual")
    h = b.layer_norm(x, d, f"{prefix}.conv.norm")
    h = b.conv_module(h, d, r.conv_kernel, f"{prefix}.conv")
    x = b.node(OpKind.Add, [x, h], f"{prefix}.conv.residual")
    x = macaron(x, "ff")
    return b.layer_norm(x, d, f"{prefix}.final_norm")


def transformer_encoder(r: ModelRecipe, name: str = "transformer_encoder", final_norm: bool = False,
                        masked: bool = False, rng: Optional[np.random.Generator] = None) -> Graph:
    b = GraphBuilder(name, rng if rng is not None else np.random.default_rng(r.seed))
    x = b.input("feats", ["L", r.d_model])
    mask = b.input("mask", ["L", "L"]) if masked else None
    for i in range(r.blocks):
        x = transformer_block(b, x, parse_dim("L"), r, f"enc.blk{i}", mask)
    if final_norm:
        x = b.layer_norm(x, r.d_model, "enc.after_norm")
    return b.build([x])


def conformer_encoder(r: ModelRecipe, name: str = "conformer_encoder") -> Graph:
    b = GraphBuilder(name, np.random.default_rng(r.seed))
    x = b.input("feats", ["L", r.d_model])
    pos = b.input("pos_emb", ["2*L-1", r.d_model])
    for i in range(r.blocks):
        x = conformer_block(b, x, pos, parse_dim("L"), r, f"enc.blk{i}")
    return b.build([x])


def relative_positional_table(length: int, d: int) -> np.ndarray:
    """Sinusoidal table for distances L-1 ... -(L-1) (row L-1 is distance 0)."""
    pos = np.arange(length - 1, -length, -1, dtype=np.float64)[:, None]
    inv = np.exp(np.arange(0, d, 2, dtype=np.float64) * (-math.log(10000.0) / d))
    table = np.zeros((2 * length - 1, d))
    table[:, 0::2] = np.sin(pos * inv)
    table[:, 1::2] = np.cos(pos * inv)[:, : d // 2]
    return table.astype(np.float32)


# staged models ------------------------------------------------------------

def asr_special_tokens(vocab: int) -> dict[str, int]:
    return {"blank": 0, "sos": vocab - 1, "eos": vocab - 1}


def decoder_step(r: ModelRecipe, rng: np.random.Generator) -> Graph:
    d, heads = r.d_model, r.heads
    b = GraphBuilder("decoder_step", rng)
    memory = b.input("memory", ["T", d])
    token = b.input("token", [1], DType.I32)
    position = b.input("position", [1], DType.I32)
    caches = [(b.input(f"cache_k{i}", ["S", d]), b.input(f"cache_v{i}", ["S", d])) for i in range(r.dec_layers)]
    emb = b.weight("dec.embed", (r.vocab, d), 1.0)
    pos_table = b.const("dec.pos_table", relative_positional_table(r.max_steps, d)[r.max_steps - 1:] * 0.5)
    x = b.node(OpKind.Add, [
        b.node(OpKind.Gather, [emb, token], "dec.embed.gather", {"axis": 0}),
        b.node(OpKind.Gather, [pos_table, position], "dec.pos.gather", {"axis": 0}),
    ], "dec.embed.add")
    new_states = []
    one, s_plus_1, t_len = 1, parse_dim("S+1"), parse_dim("T")
    for i, (ck, cv) in enumerate(caches):
        p = f"dec.layer{i}"
        h = b.layer_norm(x, d, f"{p}.norm1")
        q = b.linear(h, d, d, f"{p}.self.q_proj")
        k = b.node(OpKind.Concat, [ck, b.linear(h, d, d, f"{p}.self.k_proj")], f"{p}.self.k_cache", {"axis": 0})
        v = b.node(OpKind.Concat, [cv, b.linear(h, d, d, f"{p}.self.v_proj")], f"{p}.self.v_cache", {"axis": 0})
        new_states += [k, v]
        a = b.attention_core(q, k, v, one, s_plus_1, d, heads, f"{p}.self")
        x = b.node(OpKind.Add, [x, b.linear(a, d, d, f"{p}.self.out_proj")], f"{p}.residual1")
        h = b.layer_norm(x, d, f"{p}.norm2")
        q = b.linear(h, d, d, f"{p}.src.q_proj")
        km = b.linear(memory, d, d, f"{p}.src.k_proj")
        vm = b.linear(memory, d, d, f"{p}.src.v_proj")
        a = b.attention_core(q, km, vm, one, t_len, d, heads, f"{p}.src")
        x = b.node(OpKind.Add, [x, b.linear(a, d, d, f"{p}.src.out_proj")], f"{p}.residual2")
        h = b.layer_norm(x, d, f"{p}.norm3")
        x = b.node(OpKind.Add, [x, b.feed_forward(h, d, d * r.ffn_mult, f"{p}.ff")], f"{p}.residual3")
    x = b.layer_norm(x, d, "dec.after_norm")
    logits = b.linear(x, d, r.vocab, "dec.output")
    # sharpen the distribution a little so decoding paths are not near-ties
    logits = b.node(OpKind.Mul, [logits, b.scalar("dec.output.temperature", 3.0)], "dec.output.sharpen")
    logp = b.node(OpKind.LogSoftmax, [logits], "dec.log_softmax", {"axis": -1})
    return b.build([logp, *new_states])


def ctc_posterior(r: ModelRecipe, rng: np.random.Generator) -> Graph:
    b = GraphBuilder("ctc_posterior", rng)
    memory = b.input("memory", ["T", r.d_model])
    logits = b.linear(memory, r.d_model, r.vocab, "ctc.lo")
    logits = b.node(OpKind.Mul, [logits, b.scalar("ctc.temperature", 3.0)], "ctc.sharpen")
    return b.build([b.node(OpKind.LogSoftmax, [logits], "ctc.log_softmax", {"axis": -1})])


def tts_encoder(r: ModelRecipe, rng: np.random.Generator) -> Graph:
    b = GraphBuilder("tts_encoder", rng)
    text = b.input("text", ["L"], DType.I32)
    emb = b.weight("tts.embed", (r.vocab, r.d_model), 1.0)
    x = b.node(OpKind.Gather, [emb, text], "tts.embed.gather", {"axis": 0})
    for i in range(r.blocks):
        x = transformer_block(b, x, parse_dim("L"), r, f"tts.enc.blk{i}")
    return b.build([b.layer_norm(x, r.d_model, "tts.enc.after_norm")])


def ar_step(r: ModelRecipe, rng: np.random.Generator) -> Graph:
    d, m = r.d_model, r.n_mels
    b = GraphBuilder("ar_step", rng)
    memory = b.input("memory", ["T", d])
    prev = b.input("prev_frame", [1, m])
    state = b.input("state", [1, d])
    pre = b.node(OpKind.Relu, [b.linear(prev, m, d, "ar.prenet")], "ar.prenet.relu")
    s = b.node(OpKind.Add, [pre, state], "ar.state_in")
    h = b.layer_norm(s, d, "ar.norm1")
    q = b.linear(h, d, d, "ar.att.q_proj")
    km = b.linear(memory, d, d, "ar.att.k_proj")
    vm = b.linear(memory, d, d, "ar.att.v_proj")
    a = b.attention_core(q, km, vm, 1, parse_dim("T"), d, r.heads, "ar.att")
    s = b.node(OpKind.Add, [s, b.linear(a, d, d, "ar.att.out_proj")], "ar.residual")
    new_state = b.layer_norm(s, d, "ar.norm2")
    frame = b.linear(new_state, d, m, "ar.frame")
    stop = b.node(OpKind.Sigmoid, [b.linear(new_state, d, 1, "ar.stop")], "ar.stop.sigmoid")
    return b.build([frame, stop, new_state])


def post_decoder(r: ModelRecipe, rng: np.random.Generator) -> Graph:
    d, m = r.d_model, r.n_mels
    b = GraphBuilder("post_decoder", rng)
    frames = b.input("frames", ["N", m])
    h = b.conv(frames, m, d, 5, 1, "post.conv1")
    h = b.node(OpKind.Relu, [h], "post.relu")
    h = b.conv(h, d, m, 5, 1, "post.conv2")
    return b.build([b.node(OpKind.Add, [frames, h], "post.residual")])


def generate(recipe: ModelRecipe) -> Pack:
    """Build the unfused source model(s) for a recipe; same recipe, same bytes."""
    r = recipe.validate()
    meta = {"recipe": r.to_dict()}
    if r.architecture == "transformer_encoder":
        return Pack({"transformer_encoder": transformer_encoder(r)}, metadata=meta)
    if r.architecture == "conformer_encoder":
        return Pack({"conformer_encoder": conformer_encoder(r)}, metadata=meta)
    rng = np.random.default_rng(r.seed)
    if r.architecture == "encoder_decoder_asr":
        graphs = {
            "encoder": transformer_encoder(r, "encoder", final_norm=True, rng=rng),
            "decoder_step": decoder_step(r, rng),
            "ctc_posterior": ctc_posterior(r, rng),
        }
        meta.update(vocab_size=r.vocab, max_steps=r.max_steps, **asr_special_tokens(r.vocab))
        return Pack(graphs, roles=True, metadata=meta)
    graphs = {"encoder": tts_encoder(r, rng), "ar_step": ar_step(r, rng), "post_decoder": post_decoder(r, rng)}
    meta.update(vocab_size=r.vocab, max_steps=r.max_steps, n_mels=r.n_mels)
    return Pack(graphs, roles=True, metadata=meta)
