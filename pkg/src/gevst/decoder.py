"""Branch-modulated caption decoder plus greedy and beam decoding.

Each decoder layer runs three post-norm sublayers: causal masked self
attention, a modulated multi-input cross-attention, and the 4x FFN. The cross
sublayer attends the self-attended states over EVERY active encoder branch
separately (per-branch Q/K/V, multi-head, no output projection), gates each
result elementwise with sigmoid(W [Y; C_b] + b), and sums the gated results —
a plain sum, not an average. A softmax-across-branches gate exists behind
`gate_mode="softmax"` for ablations.

Decoding works through a `step_fn(prefix_ids) -> log-prob row` closure so the
strategies are testable against rigged models. Greedy takes the argmax
(ties -> lowest token id); beam search ranks live hypotheses by cumulative
log-prob, completes them at EOS, and returns the completed hypothesis with
the best sum-logprob/length score (truncated live hypotheses compete only
when nothing completed). Generation stops at EOS or `max_len` tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BOS_ID, EOS_ID
from .errors import ConfigError, ContractError
from .nn import (
    Ffn,
    LayerNorm,
    Linear,
    Tensor,
    apply_attention,
    attention_weights,
    ffn,
    init_ffn,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    sinusoidal_positions,
)

MAX_LEN = 20

_MASK_CACHE = {}


def causal_mask(h, t):
    key = (h, t)
    m = _MASK_CACHE.get(key)
    if m is None:
        m = np.broadcast_to(np.triu(np.ones((t, t), dtype=bool), k=1), (h, t, t))
        _MASK_CACHE[key] = m
    return m


@dataclass
class CrossAttentionParams:
    q: Linear
    k: Linear
    v: Linear


@dataclass
class DecoderLayerParams:
    self_q: Linear
    self_k: Linear
    self_v: Linear
    ln1: LayerNorm
    cross: dict  # branch -> CrossAttentionParams
    mod: dict  # branch -> Linear [2d -> d]
    ln2: LayerNorm
    ffn: Ffn
    ln3: LayerNorm


def init_decoder_layer(rng, d, branches):
    return DecoderLayerParams(
        self_q=init_linear(rng, d, d),
        self_k=init_linear(rng, d, d),
        self_v=init_linear(rng, d, d),
        ln1=init_layer_norm(d),
        cross={b: CrossAttentionParams(init_linear(rng, d, d), init_linear(rng, d, d), init_linear(rng, d, d)) for b in branches},
        mod={b: init_linear(rng, 2 * d, d) for b in branches},
        ln2=init_layer_norm(d),
        ffn=init_ffn(rng, d),
        ln3=init_layer_norm(d),
    )


def cross_attend(y, branch_x, p: CrossAttentionParams, h):
    """Multi-head attention of decoder states over one branch's outputs."""
    w = attention_weights(linear(y, p.q), linear(branch_x, p.k), h)
    return apply_attention(w, linear(branch_x, p.v), h)


def modulated_multi_input(y, branch_outputs, layer: DecoderLayerParams, h,
                          gate_mode="sigmoid", trace=None):
    """Gated sum of per-branch cross-attention contexts."""
    if gate_mode not in ("sigmoid", "softmax"):
        raise ConfigError(f"gate_mode must be sigmoid or softmax, got {gate_mode!r}")
    branches = [b for b in ("ss", "sv", "vs", "vv") if b in branch_outputs]
    if not branches:
        raise ConfigError("decoder needs at least one branch output")
    contexts, scores = [], []
    for b in branches:
        c = cross_attend(y, branch_outputs[b], layer.cross[b], h)
        contexts.append(c)
        scores.append(linear(T.concat([y, c], axis=1), layer.mod[b]))

    if gate_mode == "sigmoid":
        gates = [T.sigmoid(z) for z in scores]
    else:
        t_len, d = y.data.shape
        stacked = T.concat([T.reshape(z, (1, t_len, d)) for z in scores], axis=0)
        sm = T.softmax(T.transpose(stacked, (1, 2, 0)))  # [t x d x B], softmax over branches
        back = T.transpose(sm, (2, 0, 1))
        gates = [T.reshape(T.narrow(back, 0, i, 1), (t_len, d)) for i in range(len(branches))]

    out = T.mul(gates[0], contexts[0])
    for g, c in zip(gates[1:], contexts[1:]):
        out = T.add(out, T.mul(g, c))
    if trace is not None:
        trace.append({b: g.data.mean(axis=1).copy() for b, g in zip(branches, gates)})
    return out


def decoder_forward(layers, h, branch_outputs, embed, out_proj, token_ids,
                    gate_mode="sigmoid", trace=None):
    """Logits [T x V] for a BOS-led token id sequence (position t predicts t+1)."""
    ids = list(token_ids)
    if not ids or ids[0] != BOS_ID:
        raise ContractError(f"decoder input must start with BOS, got {ids[:3]}")
    t_len = len(ids)
    d = embed.data.shape[1]
    y = T.add(T.embedding_lookup(embed, ids), Tensor(sinusoidal_positions(t_len, d).data))
    mask = causal_mask(h, t_len)
    for lp in layers:
        w = attention_weights(linear(y, lp.self_q), linear(y, lp.self_k), h, mask=mask)
        y = layer_norm(T.add(y, apply_attention(w, linear(y, lp.self_v), h)), lp.ln1)
        att = modulated_multi_input(y, branch_outputs, lp, h, gate_mode=gate_mode, trace=trace)
        y = layer_norm(T.add(y, att), lp.ln2)
        y = layer_norm(T.add(y, ffn(y, lp.ffn)), lp.ln3)
    return linear(y, out_proj)


# ----------------------------------------------------------------- decoding


def _log_probs(row):
    m = row.max()
    return row - (m + np.log(np.exp(row - m).sum()))


def greedy_decode(step_fn, max_len=MAX_LEN):
    """Argmax decoding; returns (generated ids, summed log-prob)."""
    ids = [BOS_ID]
    total = 0.0
    for _ in range(max_len):
        lp = step_fn(ids)
        nxt = int(np.argmax(lp))  # first max = lowest token id on ties
        total += float(lp[nxt])
        ids.append(nxt)
        if nxt == EOS_ID:
            break
    return ids[1:], total


def beam_search(step_fn, beam=5, max_len=MAX_LEN):
    """Length-normalized beam search; returns (generated ids, sum log-prob, normalized score)."""
    if beam < 1:
        raise ConfigError(f"beam width must be >= 1, got {beam}")
    live = [((BOS_ID,), 0.0)]
    completed = []
    for _ in range(max_len):
        if not live:
            break
        candidates = []
        for ids, cum in live:
            lp = step_fn(list(ids))
            for tok in range(len(lp)):
                candidates.append((ids + (tok,), cum + float(lp[tok])))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        live = []
        for ids, cum in candidates[:beam]:
            if ids[-1] == EOS_ID:
                completed.append((ids, cum))
            else:
                live.append((ids, cum))
    pool = completed if completed else live
    scored = [(ids, cum, cum / (len(ids) - 1)) for ids, cum in pool]
    scored.sort(key=lambda c: (-c[2], c[0]))
    ids, cum, norm = scored[0]
    return list(ids[1:]), cum, norm
