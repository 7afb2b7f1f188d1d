"""Geometry-content fusion cells.

A cell attends from primary (query-side) features over secondary (key-side)
features twice — once scoring content against content, once geometry against
geometry — then sums the two row-stochastic maps to weight the secondary
CONTENT. The summed map's rows total 2 by construction; `renorm` averages the
two maps instead (off by default). The weighted content is blown up Er-fold,
multiplied elementwise against an equally blown-up copy of the primary
content, and sum-pooled back down with stride Er; the result updates the
primary content through a skip connection. Secondary features are never
updated. The geometry map alone also aggregates secondary GEOMETRY into
inter-geometry features.

Base variants: "cg" runs both maps (the full cell); "c" drops the geometry
map (output independent of every geometry input, inter-geometry is zero);
"g" drops the content map (attention independent of content).

Stacked cells have independent parameters; the primary content flows through,
and the reported attention maps / inter-geometry come from the LAST cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, ShapeError
from .nn import Linear, Tensor, init_linear, linear

BASES = ("c", "g", "cg")

_GATHER_CACHE = {}


def _pair_gathers(n, m):
    """Constant matrices turning [N x da]/[M x da] into aligned [N*M x da] stacks."""
    key = (n, m)
    got = _GATHER_CACHE.get(key)
    if got is None:
        eq = Tensor(np.kron(np.eye(n), np.ones((m, 1))))
        ek = Tensor(np.kron(np.ones((n, 1)), np.eye(m)))
        got = (eq, ek)
        _GATHER_CACHE[key] = got
    return got


@dataclass
class AdditiveAttention:
    """score(i, j) = w_out . tanh(W_v q_i + W_s k_j) (+ zero-init biases)."""

    s_proj: Linear  # keys   [d -> d_a]
    v_proj: Linear  # queries [d -> d_a]
    out: Linear  # [d_a -> 1]


@dataclass
class FusionCellParams:
    content: AdditiveAttention  # None under base "g"
    geometry: AdditiveAttention  # None under base "c"
    v_exp: Linear  # [d -> Er*d]
    s_exp: Linear  # [d -> Er*d]


@dataclass
class FusionOutput:
    fused_content: Tensor  # [N x d]
    inter_geometry: Tensor  # [N x d]
    content_attention: Tensor  # [N x M] or None under base "g"
    geometry_attention: Tensor  # [N x M] or None under base "c"


def _init_additive(rng, d):
    return AdditiveAttention(init_linear(rng, d, d), init_linear(rng, d, d), init_linear(rng, d, 1))


def init_fusion_cell(rng, d, er, base="cg"):
    if base not in BASES:
        raise ConfigError(f"fusion base must be one of {BASES}, got {base!r}")
    return FusionCellParams(
        content=_init_additive(rng, d) if "c" in base else None,
        geometry=_init_additive(rng, d) if "g" in base else None,
        v_exp=init_linear(rng, d, er * d),
        s_exp=init_linear(rng, d, er * d),
    )


def attention_map(att: AdditiveAttention, queries, keys):
    """Row-stochastic [N x M] additive-attention map."""
    n, m = queries.data.shape[0], keys.data.shape[0]
    if queries.data.shape[1] != keys.data.shape[1]:
        raise ShapeError(f"query width {queries.data.shape} != key width {keys.data.shape}")
    p = linear(queries, att.v_proj)
    k = linear(keys, att.s_proj)
    eq, ek = _pair_gathers(n, m)
    h = T.tanh(T.add(T.matmul(eq, p), T.matmul(ek, k)))
    scores = T.reshape(linear(h, att.out), (n, m))
    return T.softmax(scores)


def fusion_cell(params: FusionCellParams, er, content_q, geo_q, content_k, geo_k, renorm=False):
    """One cell pass. Returns (updated content, content map, geometry map, inter)."""
    n, d = content_q.data.shape
    m = content_k.data.shape[0]
    if n < 1 or m < 1:
        raise InputError("fusion needs at least one row on each side")

    alpha_con = attention_map(params.content, content_q, content_k) if params.content is not None else None
    alpha_geo = attention_map(params.geometry, geo_q, geo_k) if params.geometry is not None else None

    if alpha_con is not None and alpha_geo is not None:
        weights = T.add(alpha_con, alpha_geo)
        if renorm:
            weights = T.mul(weights, 0.5)
    else:
        weights = alpha_con if alpha_con is not None else alpha_geo

    s_hat = T.matmul(weights, content_k)
    v_dot = linear(content_q, params.v_exp)
    s_dot = linear(s_hat, params.s_exp)
    fused = T.sum_pool_stride(T.mul(s_dot, v_dot), er)
    updated = T.add(content_q, fused)

    if alpha_geo is not None:
        inter = T.matmul(alpha_geo, geo_k)
    else:
        inter = Tensor(np.zeros((n, d)))
    return updated, alpha_con, alpha_geo, inter


def stack_fusion(cells, er, primary_content, primary_geo, secondary_content, secondary_geo,
                 renorm=False, trace=None):
    """Run m cells; only the primary content is threaded through."""
    if not cells:
        raise ConfigError("at least one fusion cell is required")
    x = primary_content
    alpha_con = alpha_geo = inter = None
    for cell in cells:
        x, alpha_con, alpha_geo, inter = fusion_cell(
            cell, er, x, primary_geo, secondary_content, secondary_geo, renorm=renorm
        )
        if trace is not None:
            trace.append({
                "content": None if alpha_con is None else alpha_con.data.copy(),
                "geometry": None if alpha_geo is None else alpha_geo.data.copy(),
            })
    return FusionOutput(x, inter, alpha_con, alpha_geo)
