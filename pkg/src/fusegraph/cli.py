"""fusegraph command line.

Exit codes: 0 success, 1 verification failure, 2 bad input or file format.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bench import CONFIGS, bench, random_inputs, verify
from .errors import ConfigError, FuseGraphError
from .executor import default_workers
from .fusion import fusion_pipeline
from .graph_ir import Graph, Pack, read_pack, write_pack
from .pipeline import DecodeConfig, StagedModel, ar_tts_decode, beam_search, ctc_greedy_decode, ctc_posterior, encode
from .quantize import quantize_graph
from .recipes import ARCHITECTURES, ModelRecipe, generate

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
log = logging.getLogger("fusegraph")


def _emit(payload: dict, dest: Optional[str]) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if dest in (None, "-"):
        print(text)
    else:
        Path(dest).write_text(text + "\n")


def _pick(pack: Pack, role: Optional[str]) -> Graph:
    if role is None:
        if pack.roles and "encoder" in pack.graphs:
            return pack.graphs["encoder"]
        return pack.single()
    if role not in pack.graphs:
        raise ConfigError(f"no graph named {role!r}; file holds {', '.join(sorted(pack.graphs))}")
    return pack.graphs[role]


# commands -----------------------------------------------------------------

def cmd_generate(args) -> int:
    recipe = ModelRecipe(
        architecture=args.arch, blocks=args.blocks, d_model=args.d_model, heads=args.heads,
        length=args.length, vocab=args.vocab, seed=args.seed,
    )
    pack = generate(recipe)
    write_pack(pack, args.output)
    nodes = sum(len(g.nodes) for g in pack.graphs.values())
    print(f"wrote {args.output}: {len(pack.graphs)} graph(s), {nodes} nodes")
    return EXIT_OK


def cmd_inspect(args) -> int:
    pack = read_pack(args.model)
    info = {
        "roles": pack.roles,
        "metadata": pack.metadata,
        "graphs": {
            key: {
                "name": g.name,
                "inputs": [{"name": v.name, "dtype": v.dtype.value, "shape": [str(d) for d in v.shape]} for v in g.inputs],
                "outputs": list(g.outputs),
                "nodes": len(g.nodes),
                "node_counts": dict(sorted(g.node_counts().items())),
                "parameter_bytes": g.parameter_bytes(),
            }
            for key, g in pack.graphs.items()
        },
    }
    if args.json:
        _emit(info, "-")
        return EXIT_OK
    for key, g in info["graphs"].items():
        print(f"{key}: {g['nodes']} nodes, {g['parameter_bytes']} parameter bytes")
        for v in g["inputs"]:
            print(f"  in  {v['name']} {v['dtype']} ({', '.join(v['shape'])})")
        for kind, count in g["node_counts"].items():
            print(f"  {kind:<22}{count}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    pack = read_pack(args.input)
    rules = args.rules.split(",") if args.rules else None
    reports = {}
    graphs = {}
    for key, g in pack.graphs.items():
        graphs[key], rep = fusion_pipeline(g, rules)
        reports[key] = rep.to_dict()
    write_pack(Pack(graphs, pack.roles, pack.metadata), args.output)
    total = sum(r["total_matches"] for r in reports.values())
    print(f"wrote {args.output}: {total} fusion(s)")
    if args.report:
        _emit({"graphs": reports}, args.report)
    return EXIT_OK


def cmd_quantize(args) -> int:
    pack = read_pack(args.input)
    reports = {}
    graphs = {}
    for key, g in pack.graphs.items():
        graphs[key], rep = quantize_graph(g)
        reports[key] = rep.to_dict()
    write_pack(Pack(graphs, pack.roles, pack.metadata), args.output)
    before = sum(r["float_bytes"] for r in reports.values())
    after = sum(r["quantized_bytes"] for r in reports.values())
    print(f"wrote {args.output}: parameter bytes {before} -> {after} ({after / before if before else 1.0:.3f}x)")
    if args.report:
        _emit({"graphs": reports, "float_bytes": before, "quantized_bytes": after}, args.report)
    return EXIT_OK


def cmd_verify(args) -> int:
    a = _pick(read_pack(args.model_a), args.role)
    b = _pick(read_pack(args.model_b), args.role)
    rep = verify(a, b, trials=args.trials, tol=args.tol, seed=args.seed, length=args.length, workers=args.workers)
    verdict = "PASS" if rep.passed else "FAIL"
    print(f"{verdict}: max abs diff {rep.max_abs:.3e}, max rel diff {rep.max_rel:.3e} over {rep.trials} trials "
          f"(tol {rep.tol:g})")
    if args.json:
        _emit(rep.to_dict(), args.json)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_bench(args) -> int:
    g = _pick(read_pack(args.model), args.role)
    workers = args.workers if args.workers is not None else default_workers()
    configs = args.configs.split(",") if args.configs else CONFIGS
    report = bench(g, runs=args.runs, frame_shift_ms=args.frame_shift_ms, workers=workers,
                   length=args.length, seed=args.seed, configs=configs)
    print(f"{report.model}: L={report.length}, audio {report.audio_seconds:.3f}s, {args.runs} runs + 1 warm-up")
    print(f"  {'config':<17}{'RTF mean':>10}{'(std)':>11}{'median':>10}{'peak B':>11}{'param B':>11}{'nodes':>7}")
    for name, c in report.configs.items():
        print(f"  {name:<17}{c.rtf_mean:>10.4f} ({c.rtf_std:>8.4f}){c.rtf_median:>10.4f}"
              f"{c.peak_bytes:>11}{c.parameter_bytes:>11}{c.node_count:>7}")
    if args.json:
        _emit(report.to_dict(), args.json)
    return EXIT_OK


def _decode_input(args, m: StagedModel, rng: np.random.Generator) -> np.ndarray:
    if args.input:
        return np.load(args.input)
    return random_inputs(m.roles["encoder"], args.length, rng)[m.roles["encoder"].inputs[0].name]


def cmd_decode(args) -> int:
    m = StagedModel.load(args.model, workers=args.workers)
    rng = np.random.default_rng(args.seed)
    x = _decode_input(args, m, rng)
    t0 = time.perf_counter()
    if args.mode == "asr":
        memory = encode(m, x)
        cfg = DecodeConfig(beam_width=args.beam, max_length=args.max_length)
        nbest = beam_search(m, memory, cfg)
        out = {
            "mode": "asr",
            "tokens": nbest[0].tokens,
            "score": nbest[0].score,
            "finished": nbest[0].finished,
        }
        if "ctc_posterior" in m.roles:
            out["ctc_tokens"] = ctc_greedy_decode(ctc_posterior(m, memory), m.blank)
    else:
        memory = encode(m, x)
        res = ar_tts_decode(m, memory, DecodeConfig(max_steps=args.max_length))
        out = {"mode": "tts", "frames": res.steps, "n_mels": int(res.frames.shape[1]), "truncated": res.truncated}
        if args.output:
            np.save(args.output, res.frames)
    out["seconds"] = time.perf_counter() - t0
    _emit(out, "-")
    return EXIT_OK


# parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusegraph", description="Fuse, quantize and benchmark static model graphs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log host-loop decisions")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="write a seeded synthetic model")
    s.add_argument("--arch", choices=ARCHITECTURES, default="transformer_encoder")
    s.add_argument("--blocks", type=int, default=2)
    s.add_argument("--d-model", type=int, default=16)
    s.add_argument("--heads", type=int, default=2)
    s.add_argument("--length", type=int, default=8, help="default sequence length recorded in the metadata")
    s.add_argument("--vocab", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("inspect", help="summarize a model file")
    s.add_argument("model")
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_inspect)

    s = sub.add_parser("optimize", help="apply fusion rules")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--rules", help="comma-separated, default layer_norm,relpos_attention,attention")
    s.add_argument("--report", help="write the fusion report as JSON ('-' for stdout)")
    s.set_defaults(fn=cmd_optimize)

    s = sub.add_parser("quantize", help="8-bit dynamic quantization of matrix products")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--report", help="write the size report as JSON ('-' for stdout)")
    s.set_defaults(fn=cmd_quantize)

    s = sub.add_parser("verify", help="compare two models on seeded random inputs")
    s.add_argument("model_a")
    s.add_argument("model_b")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--length", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--role", help="graph to compare in a staged model (default: encoder)")
    s.add_argument("--workers", type=int)
    s.add_argument("--json")
    s.set_defaults(fn=cmd_verify)

    s = sub.add_parser("bench", help="real-time factor of baseline/fused/quantized variants")
    s.add_argument("model")
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--frame-shift-ms", type=float, default=10.0)
    s.add_argument("--workers", type=int, help="default: $FUSEGRAPH_WORKERS or 1")
    s.add_argument("--length", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--role")
    s.add_argument("--configs", help=f"comma-separated subset of {','.join(CONFIGS)}")
    s.add_argument("--json", help="write the report as JSON ('-' for stdout)")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("decode", help="run a staged model end to end")
    s.add_argument("model")
    s.add_argument("--mode", choices=("asr", "tts"), default="asr")
    s.add_argument("--input", help=".npy features (asr) or token ids (tts); random when omitted")
    s.add_argument("--beam", type=int, default=4)
    s.add_argument("--max-length", type=int, help="token limit (asr) or frame limit (tts)")
    s.add_argument("--length", type=int, default=8, help="length of the random input")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int)
    s.add_argument("--output", help="save synthesized frames (.npy, tts mode)")
    s.set_defaults(fn=cmd_decode)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except (FuseGraphError, OSError, ValueError) as exc:
        print(f"fusegraph {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
