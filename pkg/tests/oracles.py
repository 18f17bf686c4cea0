"""Reference implementations written from the definitions, sharing no code with the package."""

from __future__ import annotations

import itertools
import json
import math
import struct

import numpy as np


def scalar_attention(x, wq, wk, wv, bq, bk, bv, heads, mask=None):
    """Three-loop multi-head attention in float64 Python scalars."""
    x = np.asarray(x, dtype=np.float64)
    length, d = x.shape
    dk = d // heads
    q = x @ wq.astype(np.float64) + bq
    k = x @ wk.astype(np.float64) + bk
    v = x @ wv.astype(np.float64) + bv
    out = np.zeros((length, d))
    for h in range(heads):
        cols = range(h * dk, (h + 1) * dk)
        for i in range(length):
            logits = []
            for j in range(length):
                s = sum(q[i, c] * k[j, c] for c in cols) / math.sqrt(dk)
                if mask is not None:
                    s += float(np.broadcast_to(mask, (heads, length, length))[h, i, j])
                logits.append(s)
            top = max(logits)
            e = [math.exp(s - top) for s in logits]
            z = sum(e)
            for c in cols:
                out[i, c] = sum(e[j] / z * v[j, c] for j in range(length))
    return out


def pad_reshape_slice_shift(bd):
    """The exporter's relative shift done literally: pad, fold, drop a row, unfold, cut."""
    heads, length, width = bd.shape
    padded = np.concatenate([np.zeros((heads, length, 1), bd.dtype), bd], axis=-1)
    folded = padded.reshape(heads, width + 1, length)
    dropped = folded[:, 1:, :]
    unfolded = dropped.reshape(heads, length, width)
    return unfolded[:, :, :length]


def explicit_r_relpos(x, wq, wk, wv, bq, bk, bv, w_pos, u, v_bias, pos_emb, heads):
    """Materialize R[i, j] = pos_emb row for distance i - j and evaluate each term directly.

    Row ``L - 1 - (i - j)`` of ``pos_emb`` holds distance ``i - j``.
    """
    x = np.asarray(x, dtype=np.float64)
    length, d = x.shape
    dk = d // heads
    q = x @ wq + bq
    k = x @ wk + bk
    v = x @ wv + bv
    p = pos_emb.astype(np.float64) @ w_pos
    r = np.empty((length, length, d))
    for i in range(length):
        for j in range(length):
            r[i, j] = p[length - 1 - (i - j)]
    out = np.zeros((length, d))
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        logits = np.empty((length, length))
        for i in range(length):
            for j in range(length):
                content = (qh[i] + u[h]) @ kh[j]
                position = (qh[i] + v_bias[h]) @ r[i, j, cols]
                logits[i, j] = (content + position) / math.sqrt(dk)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        out[:, cols] = (e / e.sum(axis=1, keepdims=True)) @ vh
    return out


def scalar_layer_norm(x, gamma, beta, eps):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        out[idx] = [(r - mu) / math.sqrt(var + eps) * g + b for r, g, b in zip(row, gamma, beta)]
    return out


def two_pass_ctc(posterior, blank):
    """Pass one picks a label per frame, pass two collapses runs then removes blanks."""
    path = []
    for row in posterior:
        best, best_j = None, 0
        for j, value in enumerate(row):
            if best is None or value > best:
                best, best_j = value, j
        path.append(best_j)
    runs = [tok for i, tok in enumerate(path) if i == 0 or tok != path[i - 1]]
    return [tok for tok in runs if tok != blank]


def exhaustive_best(step_logp, vocab, sos, eos, max_length):
    """Score every token sequence of length <= max_length (ending at the first eos).

    ``step_logp(prefix)`` returns the log-prob vector after ``prefix``. Returns
    (best tokens, best score) with ties broken by the lexicographically smaller
    sequence.
    """
    best = None
    for n in range(1, max_length + 1):
        for seq in itertools.product(range(vocab), repeat=n):
            if eos in seq[:-1]:
                continue
            if n < max_length and seq[-1] != eos:
                continue
            prefix, score = [sos], 0.0
            for tok in seq:
                score += float(step_logp(prefix)[tok])
                prefix = prefix + [tok]
            key = (-score, prefix)
            if best is None or key < best:
                best = key
    return best[1], -best[0]


def manifest_parameter_bytes(path):
    """Parameter bytes read straight from a GraphPack header: blob lengths plus 8 per quantized tensor."""
    data = open(path, "rb").read()
    (mlen,) = struct.unpack_from("<Q", data, 8)
    manifest = json.loads(data[16:16 + mlen])
    total = 0
    for g in manifest["graphs"]:
        for e in g["initializers"]:
            total += e["length"] + (8 if "quant" in e else 0)
    return total
