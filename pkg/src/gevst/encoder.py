"""Geometry-entangled self-attention (content / intra-geometry / inter-geometry).

Each layer builds up to three per-head row-stochastic maps over the same
tokens: one from the evolving content, one from the static intra-modal
geometry embeddings, one from the static cross-modal inter-geometry features
produced by fusion. A per-layer gate (softmax over the token-mean of
x W_gate, shared across heads) mixes the maps convexly; the combined map is
applied to the content values, then the usual post-norm residual + 4x FFN
sublayers follow. No output projection exists after the value concat — the
combined map hits the values directly.

Variants nest: "con" uses only the content map, "con_intra" adds the
intra-geometry map, "con_intra_inter" all three. Forcing the extra gate
logits to -1e9 makes the richer variant reproduce the poorer one exactly
(the extra gate scores underflow to 0).

Four branches share this layer type: vv (pure visual content), vs (semantic
fused into visual), sv (visual fused into semantic), ss (pure semantic).
Visual-side branches take visual intra-geometry and the inter-geometry of the
visual-primary fusion; semantic-side branches are symmetric. The geometry
inputs are identical at every layer; only content evolves.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, ShapeError
from .fusion import stack_fusion
from .nn import (
    Ffn,
    LayerNorm,
    Linear,
    apply_attention,
    attention_weights,
    ffn,
    init_ffn,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
)

VARIANTS = ("con", "con_intra", "con_intra_inter")
BRANCHES = ("ss", "sv", "vs", "vv")


def variant_map_count(variant):
    if variant not in VARIANTS:
        raise ConfigError(f"gesa variant must be one of {VARIANTS}, got {variant!r}")
    return 1 + variant.count("_")


@dataclass
class GesaLayerParams:
    q_c: Linear
    k_c: Linear
    v_c: Linear
    q_intra: Linear  # None under "con"
    k_intra: Linear
    q_inter: Linear  # None unless "con_intra_inter"
    k_inter: Linear
    gate: Linear  # [d -> number of active maps]
    ln1: LayerNorm
    ffn: Ffn
    ln2: LayerNorm


def init_gesa_layer(rng, d, h, variant="con_intra_inter"):
    k = variant_map_count(variant)
    if d % h != 0:
        raise ConfigError(f"model width {d} not divisible by {h} heads")
    with_intra = k >= 2
    with_inter = k >= 3
    return GesaLayerParams(
        q_c=init_linear(rng, d, d),
        k_c=init_linear(rng, d, d),
        v_c=init_linear(rng, d, d),
        q_intra=init_linear(rng, d, d) if with_intra else None,
        k_intra=init_linear(rng, d, d) if with_intra else None,
        q_inter=init_linear(rng, d, d) if with_inter else None,
        k_inter=init_linear(rng, d, d) if with_inter else None,
        gate=init_linear(rng, d, k),
        ln1=init_layer_norm(d),
        ffn=init_ffn(rng, d),
        ln2=init_layer_norm(d),
    )


def gesa_attention_maps(x_prev, g_intra, g_inter, params: GesaLayerParams, h):
    """The active per-head maps, in (content, intra, inter) order."""
    if x_prev.data.shape[-1] % h != 0:
        raise ConfigError(f"width {x_prev.data.shape[-1]} not divisible by {h} heads")
    maps = [attention_weights(linear(x_prev, params.q_c), linear(x_prev, params.k_c), h)]
    if params.q_intra is not None:
        if g_intra.data.shape != x_prev.data.shape:
            raise ShapeError(f"intra-geometry shape {g_intra.data.shape} != content shape {x_prev.data.shape}")
        maps.append(attention_weights(linear(g_intra, params.q_intra), linear(g_intra, params.k_intra), h))
    if params.q_inter is not None:
        if g_inter.data.shape != x_prev.data.shape:
            raise ShapeError(f"inter-geometry shape {g_inter.data.shape} != content shape {x_prev.data.shape}")
        maps.append(attention_weights(linear(g_inter, params.q_inter), linear(g_inter, params.k_inter), h))
    return maps


def gesa_gates(x_prev, params: GesaLayerParams):
    """Convex gate over the active maps: softmax(mean over tokens of x W + b)."""
    return T.softmax(T.mean(linear(x_prev, params.gate), axis=0))


def gesa_layer(x_prev, g_intra, g_inter, params: GesaLayerParams, h, trace=None):
    maps = gesa_attention_maps(x_prev, g_intra, g_inter, params, h)
    gates = gesa_gates(x_prev, params)
    combined = T.mul(maps[0], T.narrow(gates, 0, 0, 1))
    for i in range(1, len(maps)):
        combined = T.add(combined, T.mul(maps[i], T.narrow(gates, 0, i, 1)))
    attended = apply_attention(combined, linear(x_prev, params.v_c), h)
    a = layer_norm(T.add(x_prev, attended), params.ln1)
    out = layer_norm(T.add(a, ffn(a, params.ffn)), params.ln2)
    if trace is not None:
        trace.append(gates.data.copy())
    return out


def branch_forward(layers, h, content, g_intra, g_inter, trace=None):
    """Stack of GESA layers; geometry inputs repeat unchanged at every layer."""
    x = content
    for lp in layers:
        x = gesa_layer(x, g_intra, g_inter, lp, h, trace=trace)
    return x


def encode_all(v_con, v_geo, s_con, s_geo, fusion_vs, fusion_sv, branch_layers,
               h, er, active_branches=BRANCHES, renorm=False, trace=None):
    """Run the needed fusions and every active branch.

    fusion_vs fuses semantic into visual (visual primary); fusion_sv the
    reverse. vv/ss reuse the matching fusion's inter-geometry but keep their
    pure content. Returns {branch: Tensor}, in ss, sv, vs, vv order.
    """
    active = [b for b in BRANCHES if b in active_branches]
    if not active:
        raise ConfigError("at least one encoder branch must be active")
    unknown = set(active_branches) - set(BRANCHES)
    if unknown:
        raise ConfigError(f"unknown branches {sorted(unknown)}")

    vs_out = sv_out = None
    if "vv" in active or "vs" in active:
        vs_trace = [] if trace is not None else None
        vs_out = stack_fusion(fusion_vs, er, v_con, v_geo, s_con, s_geo, renorm=renorm, trace=vs_trace)
        if trace is not None:
            trace["fusion_vs"] = vs_trace
    if "ss" in active or "sv" in active:
        sv_trace = [] if trace is not None else None
        sv_out = stack_fusion(fusion_sv, er, s_con, s_geo, v_con, v_geo, renorm=renorm, trace=sv_trace)
        if trace is not None:
            trace["fusion_sv"] = sv_trace

    inputs = {}
    if "ss" in active:
        inputs["ss"] = (s_con, s_geo, sv_out.inter_geometry)
    if "sv" in active:
        inputs["sv"] = (sv_out.fused_content, s_geo, sv_out.inter_geometry)
    if "vs" in active:
        inputs["vs"] = (vs_out.fused_content, v_geo, vs_out.inter_geometry)
    if "vv" in active:
        inputs["vv"] = (v_con, v_geo, vs_out.inter_geometry)

    outputs = {}
    for b in active:
        gate_trace = [] if trace is not None else None
        content, g_intra, g_inter = inputs[b]
        outputs[b] = branch_forward(branch_layers[b], h, content, g_intra, g_inter, trace=gate_trace)
        if trace is not None:
            trace.setdefault("gates", {})[b] = gate_trace
    return outputs
