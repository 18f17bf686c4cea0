"""Host-side loops around static role graphs.

Each role (encoder, decoder step, CTC posterior, AR step, post decoder) is a
loop-free graph. Everything whose trip count depends on the input, beam
search and autoregressive synthesis, lives here in Python.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ExecutionError, FormatError, SignatureError
from .executor import Session
from .graph_ir import Graph, Pack, read_pack, write_pack

log = logging.getLogger(__name__)

ROLES = ("encoder", "decoder_step", "ctc_posterior", "ar_step", "post_decoder")


@dataclass
class StagedModel:
    roles: dict[str, Graph]
    vocab_size: int = 0
    sos: int = -1
    eos: int = -1
    blank: int = 0
    max_steps: int = 64
    metadata: dict = field(default_factory=dict)
    workers: Optional[int] = None

    def __post_init__(self):
        unknown = sorted(set(self.roles) - set(ROLES))
        if unknown:
            raise FormatError(f"unknown role(s) {', '.join(unknown)}; expected a subset of {', '.join(ROLES)}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        self._sessions: dict[str, Session] = {}

    def session(self, role: str) -> Session:
        if role not in self.roles:
            raise SignatureError(f"staged model has no {role} graph (roles: {', '.join(sorted(self.roles))})")
        if role not in self._sessions:
            self._sessions[role] = Session(self.roles[role], self.workers)
        return self._sessions[role]

    def close(self) -> None:
        for s in self._sessions.values():
            s.close()
        self._sessions.clear()

    def map_graphs(self, fn: Callable[[Graph], Graph]) -> "StagedModel":
        """A new staged model with ``fn`` applied to every role graph."""
        roles = {role: fn(g) for role, g in self.roles.items()}
        return replace(self, roles=roles, metadata=dict(self.metadata))

    # storage --------------------------------------------------------------
    @classmethod
    def from_pack(cls, pack: Pack, workers: Optional[int] = None) -> "StagedModel":
        if not pack.roles:
            raise FormatError("file holds plain graphs, not a staged model with roles")
        meta = dict(pack.metadata)
        return cls(
            dict(pack.graphs),
            vocab_size=int(meta.get("vocab_size", 0)),
            sos=int(meta.get("sos", -1)),
            eos=int(meta.get("eos", -1)),
            blank=int(meta.get("blank", 0)),
            max_steps=int(meta.get("max_steps", 64)),
            metadata=meta,
            workers=workers,
        )

    def to_pack(self) -> Pack:
        meta = dict(self.metadata)
        meta.update(vocab_size=self.vocab_size, sos=self.sos, eos=self.eos, blank=self.blank, max_steps=self.max_steps)
        return Pack(dict(self.roles), roles=True, metadata=meta)

    @classmethod
    def load(cls, path: str | Path, workers: Optional[int] = None) -> "StagedModel":
        return cls.from_pack(read_pack(path), workers)

    def save(self, path: str | Path) -> None:
        write_pack(self.to_pack(), path)


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 4
    maxlen_ratio: float = 1.0
    max_length: Optional[int] = None  # absolute cap, overrides the ratio
    stop_threshold: float = 0.5
    length_penalty: float = 0.0
    max_steps: Optional[int] = None  # AR-TTS frame cap, defaults to the model's

    def __post_init__(self):
        if self.beam_width < 1:
            raise ConfigError(f"beam_width must be >= 1, got {self.beam_width}")
        if not 0.0 < self.stop_threshold < 1.0:
            raise ConfigError(f"stop_threshold must lie in (0, 1), got {self.stop_threshold}")
        if self.maxlen_ratio <= 0:
            raise ConfigError(f"maxlen_ratio must be positive, got {self.maxlen_ratio}")
        for name in ("max_length", "max_steps"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")

    def length_limit(self, input_length: int, model_cap: int) -> int:
        if self.max_length is not None:
            limit = self.max_length
        else:
            limit = max(1, int(math.ceil(self.maxlen_ratio * input_length)))
        return min(limit, model_cap)


@dataclass
class BeamHypothesis:
    tokens: list[int]
    score: float
    state: list[np.ndarray] = field(default_factory=list, repr=False)
    finished: bool = False

    def final_score(self, length_penalty: float) -> float:
        return self.score + length_penalty * (len(self.tokens) - 1)


# single-pass roles --------------------------------------------------------

def _run_single(m: StagedModel, role: str, value: np.ndarray) -> np.ndarray:
    session = m.session(role)
    g = session.graph
    outputs, _ = session.run({g.inputs[0].name: value})
    return outputs[g.outputs[0]]


def encode(m: StagedModel, features: np.ndarray) -> np.ndarray:
    """One run of the encoder graph; no host loop."""
    return _run_single(m, "encoder", features)


def ctc_posterior(m: StagedModel, memory: np.ndarray) -> np.ndarray:
    return _run_single(m, "ctc_posterior", memory)


def ctc_greedy_decode(posterior: np.ndarray, blank: int = 0) -> list[int]:
    """Frame-wise argmax, merge repeats, drop blanks."""
    best = np.argmax(np.asarray(posterior), axis=-1)
    out: list[int] = []
    prev = None
    for tok in best.tolist():
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return out


# decoder loop -------------------------------------------------------------

class _Decoder:
    """Calls the decoder-step graph: (memory, token, position, *state) -> (logp, *state)."""

    def __init__(self, m: StagedModel, memory: np.ndarray):
        self.session = m.session("decoder_step")
        g = self.session.graph
        if len(g.inputs) < 3 or len(g.outputs) != len(g.inputs) - 2:
            raise SignatureError(
                "decoder_step must take (memory, token, position, *state) and return (log-probs, *state)"
            )
        self.memory = memory
        self.names = [v.name for v in g.inputs]
        self.state_infos = g.inputs[3:]
        self.outputs = list(g.outputs)

    def initial_state(self) -> list[np.ndarray]:
        # caches start with zero rows; the fixed dims come from the signature
        state = []
        for info in self.state_infos:
            shape = [0 if not isinstance(d, int) else d for d in info.shape]
            state.append(np.zeros(shape, dtype=info.dtype.numpy))
        return state

    def step(self, hyp: BeamHypothesis) -> tuple[np.ndarray, list[np.ndarray]]:
        feeds = {
            self.names[0]: self.memory,
            self.names[1]: np.array([hyp.tokens[-1]], dtype=np.int32),
            self.names[2]: np.array([len(hyp.tokens) - 1], dtype=np.int32),
        }
        feeds.update(zip(self.names[3:], hyp.state))
        out, _ = self.session.run(feeds)
        logp = np.asarray(out[self.outputs[0]], dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(logp)):
            raise ExecutionError(f"decoder produced non-finite log-probabilities after {hyp.tokens}")
        return logp, [out[name] for name in self.outputs[1:]]


def beam_search(m: StagedModel, memory: np.ndarray, cfg: DecodeConfig = DecodeConfig()) -> list[BeamHypothesis]:
    """Length-synchronous beam search; returns the n-best list, best first.

    Each step expands every live hypothesis, keeps the ``beam_width`` best
    continuations by accumulated log-prob (ties go to the lower token id, then
    the earlier hypothesis) and retires those ending in eos. Hypotheses still
    live at the length limit are retired unfinished.
    """
    decoder = _Decoder(m, memory)
    limit = cfg.length_limit(memory.shape[0], m.max_steps)
    live = [BeamHypothesis([m.sos], 0.0, decoder.initial_state())]
    ended: list[BeamHypothesis] = []
    for step in range(limit):
        candidates = []
        states = []
        for rank, hyp in enumerate(live):
            logp, state = decoder.step(hyp)
            states.append(state)
            candidates.extend((-(hyp.score + lp), tok, rank) for tok, lp in enumerate(logp.tolist()))
        candidates.sort()
        parents, live = live, []
        for neg, tok, rank in candidates[: cfg.beam_width]:
            new = BeamHypothesis(parents[rank].tokens + [tok], -neg, states[rank], tok == m.eos)
            (ended if new.finished else live).append(new)
        log.debug("beam step %d: %d live, %d ended", step + 1, len(live), len(ended))
        if not live:
            break
    ended.extend(live)
    ended.sort(key=lambda h: (-h.final_score(cfg.length_penalty), h.tokens))
    return ended


def greedy_search(m: StagedModel, memory: np.ndarray, cfg: DecodeConfig = DecodeConfig()) -> BeamHypothesis:
    """Argmax decoding, written independently of :func:`beam_search`."""
    decoder = _Decoder(m, memory)
    hyp = BeamHypothesis([m.sos], 0.0, decoder.initial_state())
    for _ in range(cfg.length_limit(memory.shape[0], m.max_steps)):
        logp, state = decoder.step(hyp)
        tok = int(np.argmax(logp))  # first maximum, i.e. lowest id on ties
        hyp = BeamHypothesis(hyp.tokens + [tok], hyp.score + float(logp[tok]), state, tok == m.eos)
        if hyp.finished:
            break
    return hyp


# autoregressive synthesis -------------------------------------------------

@dataclass
class TTSResult:
    frames: np.ndarray  # after the post decoder, (N, n_mels)
    raw_frames: np.ndarray  # straight from the AR loop
    stop_probs: list[float]
    truncated: bool

    @property
    def steps(self) -> int:
        return len(self.stop_probs)


def ar_tts_decode(m: StagedModel, text_memory: np.ndarray, cfg: DecodeConfig = DecodeConfig()) -> TTSResult:
    """Feed each frame back into the AR step until stop-prob exceeds the threshold,
    then run the post decoder once over everything produced."""
    session = m.session("ar_step")
    g = session.graph
    if len(g.inputs) != 3 or len(g.outputs) != 3:
        raise SignatureError("ar_step must take (memory, prev_frame, state) and return (frame, stop_prob, state)")
    mem_name, frame_name, state_name = (v.name for v in g.inputs)
    frame_out, stop_out, state_out = g.outputs
    frame = np.zeros([d if isinstance(d, int) else 1 for d in g.inputs[1].shape], dtype=np.float32)
    state = np.zeros([d if isinstance(d, int) else 1 for d in g.inputs[2].shape], dtype=np.float32)
    cap = cfg.max_steps if cfg.max_steps is not None else m.max_steps
    frames, stops = [], []
    truncated = True
    for _ in range(cap):
        out, _ = session.run({mem_name: text_memory, frame_name: frame, state_name: state})
        frame, state = out[frame_out], out[state_out]
        stop = float(np.asarray(out[stop_out]).reshape(-1)[0])
        frames.append(frame)
        stops.append(stop)
        if stop > cfg.stop_threshold:
            truncated = False
            break
    log.debug("ar loop: %d frames, truncated=%s", len(frames), truncated)
    raw = np.concatenate(frames, axis=0)
    post = _run_single(m, "post_decoder", raw) if "post_decoder" in m.roles else raw
    return TTSResult(post, raw, stops, truncated)
