import logging

import numpy as np
import pytest

from fusegraph.errors import ConfigError, ExecutionError, FormatError, SignatureError
from fusegraph.executor import Session
from fusegraph.fusion import fusion_pipeline
from fusegraph.graph_ir import Graph, Node, OpKind, ValueInfo, parse_dim
from fusegraph.pipeline import (
    DecodeConfig,
    StagedModel,
    ar_tts_decode,
    beam_search,
    ctc_greedy_decode,
    ctc_posterior,
    encode,
    greedy_search,
)
from fusegraph.quantize import quantize_graph
from fusegraph.recipes import ModelRecipe, generate
from fusegraph.tensor import DType
from oracles import exhaustive_best, two_pass_ctc

T = parse_dim("T")


def asr(seed=0, **kw):
    return StagedModel.from_pack(generate(ModelRecipe(architecture="encoder_decoder_asr", seed=seed, **kw)))


def tts(seed=0, **kw):
    return StagedModel.from_pack(generate(ModelRecipe(architecture="ar_tts", seed=seed, **kw)))


def fused(m):
    return m.map_graphs(lambda g: fusion_pipeline(g)[0])


def quantized(m):
    return m.map_graphs(lambda g: quantize_graph(fusion_pipeline(g)[0])[0])


def feats(m, length, seed):
    d = m.roles["encoder"].inputs[0].shape[1]
    return np.random.default_rng(seed).standard_normal((length, d)).astype(np.float32)


def text(m, length, seed):
    return np.random.default_rng(seed).integers(0, m.vocab_size, length).astype(np.int32)


# encoder and CTC ----------------------------------------------------------

def test_identity_encoder_returns_features():
    g = Graph("enc", [ValueInfo("x", DType.F32, (T, 4))], ["y"],
              [Node("id", OpKind.Reshape, ["x"], ["y"], {"shape": ["T", 4]})])
    m = StagedModel({"encoder": g})
    x = np.random.default_rng(0).standard_normal((5, 4)).astype(np.float32)
    assert np.array_equal(encode(m, x), x)


@pytest.mark.parametrize("length", [1, 6])
def test_fused_encoder_and_ctc_agree(length):
    m = asr()
    f = fused(m)
    x = feats(m, length, 1)
    mem, mem_f = encode(m, x), encode(f, x)
    assert mem.shape == (length, 16)
    np.testing.assert_allclose(mem_f, mem, atol=1e-5)
    post = ctc_posterior(m, mem)
    assert post.shape == (length, m.vocab_size)
    np.testing.assert_allclose(np.log(np.exp(post.astype(np.float64)).sum(1)), 0, atol=1e-5)
    np.testing.assert_allclose(ctc_posterior(f, mem), post, atol=1e-5)


def test_ctc_collapse_examples():
    a, b, blank = 2, 3, 0
    onehot = np.eye(4)[[a, a, blank, b, b]]
    assert ctc_greedy_decode(onehot, blank) == [a, b]
    assert ctc_greedy_decode(np.eye(4)[[blank] * 6], blank) == []
    assert ctc_greedy_decode(np.eye(4)[[a, blank, a]], blank) == [a, a]


def test_ctc_against_two_pass_oracle():
    rng = np.random.default_rng(9)
    for _ in range(200):
        post = rng.standard_normal((int(rng.integers(1, 30)), 5))
        post[rng.random(post.shape[0]) < 0.3] = np.eye(5)[0] * 10
        assert ctc_greedy_decode(post, 0) == two_pass_ctc(post.tolist(), 0)


# beam search --------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_beam_one_is_greedy(seed):
    m = asr(seed)
    mem = encode(m, feats(m, 7, seed))
    cfg = DecodeConfig(beam_width=1, max_length=10)
    best = beam_search(m, mem, cfg)[0]
    g = greedy_search(m, mem, cfg)
    assert best.tokens == g.tokens and best.score == pytest.approx(g.score)


def _replay(m, memory):
    """Log-prob vector after a prefix, computed by replaying the prefix from empty caches."""
    g = m.roles["decoder_step"]

    def step_logp(prefix):
        with Session(g) as s:
            caches = [np.zeros((0, v.shape[1]), np.float32) for v in g.inputs[3:]]
            for pos, tok in enumerate(prefix):
                feeds = {"memory": memory, "token": np.array([tok], np.int32), "position": np.array([pos], np.int32)}
                feeds.update({v.name: c for v, c in zip(g.inputs[3:], caches)})
                out, _ = s.run(feeds)
                caches = [out[name] for name in g.outputs[1:]]
            return out[g.outputs[0]].reshape(-1).astype(np.float64)

    return step_logp


@pytest.mark.parametrize("seed", range(3))
def test_wide_beam_is_exhaustive(seed):
    m = asr(seed, vocab=3)
    mem = encode(m, feats(m, 4, seed))
    nbest = beam_search(m, mem, DecodeConfig(beam_width=27, max_length=3))
    tokens, score = exhaustive_best(_replay(m, mem), 3, m.sos, m.eos, 3)
    assert nbest[0].tokens == tokens
    assert nbest[0].score == pytest.approx(score, abs=1e-9)


def _constant_decoder(vocab, peak):
    table = np.full((vocab, vocab), -5.0, np.float32)
    table[:, peak] = 5.0
    return Graph("decoder_step", [
        ValueInfo("memory", DType.F32, (T, 4)),
        ValueInfo("token", DType.I32, (1,)),
        ValueInfo("position", DType.I32, (1,)),
    ], ["logp"], [
        Node("a", OpKind.Gather, ["table", "token"], ["logits"], {"axis": 0}),
        Node("b", OpKind.LogSoftmax, ["logits"], ["logp"], {"axis": -1}),
    ], {"table": table})


def test_decoder_that_always_says_eos_stops_after_one_step():
    m = StagedModel({"decoder_step": _constant_decoder(4, 3)}, vocab_size=4, sos=3, eos=3)
    nbest = beam_search(m, np.zeros((2, 4), np.float32), DecodeConfig(beam_width=3, max_length=10))
    assert nbest[0].tokens == [3, 3] and nbest[0].finished
    only = beam_search(m, np.zeros((2, 4), np.float32), DecodeConfig(beam_width=1, max_length=10))
    assert [h.tokens for h in only] == [[3, 3]]


def test_unfinished_hypotheses_are_flagged_at_the_cap():
    m = StagedModel({"decoder_step": _constant_decoder(4, 1)}, vocab_size=4, sos=3, eos=3)
    best = beam_search(m, np.zeros((2, 4), np.float32), DecodeConfig(beam_width=2, max_length=5))[0]
    assert best.tokens == [3, 1, 1, 1, 1, 1] and not best.finished


def test_non_finite_log_probs_are_an_execution_error():
    g = _constant_decoder(4, 3)
    g.initializers["table"][0, 0] = np.nan
    m = StagedModel({"decoder_step": g}, vocab_size=4, sos=0, eos=3)
    with pytest.raises(ExecutionError, match="non-finite"):
        beam_search(m, np.zeros((2, 4), np.float32))


def test_fusion_is_transparent_to_beam_search():
    m = asr(4)
    f = fused(m)
    for seed in range(3):
        x = feats(m, 6, seed)
        a = beam_search(m, encode(m, x), DecodeConfig(max_length=8))
        b = beam_search(f, encode(f, x), DecodeConfig(max_length=8))
        assert [h.tokens for h in a] == [h.tokens for h in b]
        assert all(abs(p.score - q.score) <= 1e-4 for p, q in zip(a, b))


def test_host_loop_decisions_are_logged(caplog):
    m = asr()
    with caplog.at_level(logging.DEBUG, logger="fusegraph.pipeline"):
        beam_search(m, encode(m, feats(m, 3, 0)), DecodeConfig(max_length=2))
    assert any("beam step" in r.message for r in caplog.records)


def test_no_graph_contains_a_loop_kind():
    assert not any("loop" in k.value.lower() or k.value in ("If", "Scan") for k in OpKind)


def test_bad_configs():
    with pytest.raises(ConfigError):
        DecodeConfig(beam_width=0)
    with pytest.raises(ConfigError):
        DecodeConfig(stop_threshold=1.0)
    with pytest.raises(FormatError):
        StagedModel({"vocoder": asr().roles["encoder"]})
    with pytest.raises(SignatureError, match="no ar_step"):
        ar_tts_decode(asr(), np.zeros((2, 16), np.float32))


# autoregressive synthesis -------------------------------------------------

def _forced_stop(m, logit):
    def edit(g):
        if g.name != "ar_step":
            return g
        inits = dict(g.initializers)
        inits["ar.stop.weight"] = np.zeros_like(inits["ar.stop.weight"])
        inits["ar.stop.bias"] = np.full_like(inits["ar.stop.bias"], logit)
        return g.copy(initializers=inits)

    return m.map_graphs(edit)


def test_stop_at_once_gives_one_frame():
    m = _forced_stop(tts(), 50.0)
    res = ar_tts_decode(m, encode(m, text(m, 5, 0)))
    assert res.steps == 1 and not res.truncated
    assert res.frames.shape == (1, m.metadata["n_mels"])


def test_never_stopping_hits_the_cap():
    m = _forced_stop(tts(), -50.0)
    res = ar_tts_decode(m, encode(m, text(m, 5, 0)), DecodeConfig(max_steps=7))
    assert res.steps == 7 and res.truncated and res.frames.shape[0] == 7


def test_post_decoder_runs_once_over_all_frames():
    m = _forced_stop(tts(), -50.0)
    res = ar_tts_decode(m, encode(m, text(m, 4, 1)), DecodeConfig(max_steps=5))
    post, _ = Session(m.roles["post_decoder"]).run({"frames": res.raw_frames})
    assert np.array_equal(res.frames, next(iter(post.values())))


def _tts_frame_diffs(seeds, steps=10):
    diffs = []
    for seed in seeds:
        m = _forced_stop(tts(seed), -50.0)
        q = quantized(m)
        t = text(m, 6, seed)
        a = ar_tts_decode(m, encode(m, t), DecodeConfig(max_steps=steps))
        b = ar_tts_decode(q, encode(q, t), DecodeConfig(max_steps=steps))
        diffs.append(np.abs(a.raw_frames - b.raw_frames).max(axis=1))
    return np.concatenate(diffs)


@pytest.mark.xfail(strict=True, reason="8-bit error over the loop reaches about 0.1 per frame on these models")
def test_quantized_tts_within_5e_2_per_frame():
    assert _tts_frame_diffs(range(10)).max() <= 5e-2


def test_quantized_tts_frame_error_is_bounded():
    diffs = _tts_frame_diffs(range(10))
    assert diffs.max() <= 0.15
    assert np.median(diffs) <= 5e-2


def test_save_and_load(tmp_path):
    m = asr(2)
    m.save(tmp_path / "asr.gp")
    back = StagedModel.load(tmp_path / "asr.gp")
    assert (back.sos, back.eos, back.blank, back.vocab_size) == (m.sos, m.eos, m.blank, m.vocab_size)
    x = feats(m, 5, 0)
    assert beam_search(back, encode(back, x))[0].tokens == beam_search(m, encode(m, x))[0].tokens
