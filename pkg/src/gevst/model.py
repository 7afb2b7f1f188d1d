"""Full model assembly: inputs -> four-branch encoding -> caption logits.

Parameter layout (and with it the checkpoint manifest order) is fixed by the
declaration order of ModelParams and the deterministic walker in nn. Only the
branches named in the config get parameters, and fusion stacks exist only
when some active branch consumes them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .caption_encoder import CaptionEncoderParams, encode_captions, init_caption_encoder
from .config import TrainConfig
from .decoder import DecoderLayerParams, decoder_forward, init_decoder_layer, _log_probs
from .encoder import encode_all, init_gesa_layer
from .errors import InputError
from .fusion import init_fusion_cell
from .geometry import embed_geometry, init_geometry
from .nn import Linear, Tensor, init_embedding, init_linear, linear
from .tensor import no_grad


@dataclass
class ModelParams:
    vis_in: Linear  # raw region features -> d_model
    geo_visual: Linear
    geo_semantic: Linear
    captions: CaptionEncoderParams
    fusion_vs: list  # semantic fused into visual; None when unused
    fusion_sv: list
    branches: dict  # branch name -> list of GESA layers
    dec_embed: Tensor
    dec_layers: list
    out: Linear  # d_model -> vocab


def needs_fusion(branches):
    return ("vv" in branches or "vs" in branches, "ss" in branches or "sv" in branches)


def init_model(cfg: TrainConfig, vocab_size, rng) -> ModelParams:
    d = cfg.d_model
    need_vs, need_sv = needs_fusion(cfg.branches)
    return ModelParams(
        vis_in=init_linear(rng, cfg.raw_feat_dim, d),
        geo_visual=init_geometry(rng, d),
        geo_semantic=init_geometry(rng, d),
        captions=init_caption_encoder(rng, vocab_size, cfg.enc_width, cfg.enc_layers, d),
        fusion_vs=[init_fusion_cell(rng, d, cfg.expand_ratio, cfg.fusion_base) for _ in range(cfg.fusion_cells)] if need_vs else None,
        fusion_sv=[init_fusion_cell(rng, d, cfg.expand_ratio, cfg.fusion_base) for _ in range(cfg.fusion_cells)] if need_sv else None,
        branches={b: [init_gesa_layer(rng, d, cfg.heads, cfg.gesa_variant) for _ in range(cfg.layers)] for b in ("ss", "sv", "vs", "vv") if b in cfg.branches},
        dec_embed=init_embedding(rng, vocab_size, d),
        dec_layers=[init_decoder_layer(rng, d, [b for b in ("ss", "sv", "vs", "vv") if b in cfg.branches]) for _ in range(cfg.layers)],
        out=init_linear(rng, d, vocab_size),
    )


def encode_sample(params: ModelParams, cfg: TrainConfig, sample, vocab, trace=None):
    """Branch outputs {name: Tensor[N_branch x d]} for one dataset sample."""
    if not sample.regions:
        raise InputError(f"sample {sample.id}: no regions")
    feats = np.stack([r.feat for r in sample.regions])
    if feats.shape[1] != cfg.raw_feat_dim:
        raise InputError(f"sample {sample.id}: feature width {feats.shape[1]} != configured {cfg.raw_feat_dim}")
    v_con = linear(Tensor(feats), params.vis_in)
    v_geo = embed_geometry([r.box for r in sample.regions], sample.image_wh, params.geo_visual)

    if not sample.dense_captions:
        raise InputError(f"sample {sample.id}: no dense captions")
    id_seqs = [vocab.encode(dc.text) for dc in sample.dense_captions]
    s_con = encode_captions(params.captions, cfg.enc_heads, id_seqs)
    s_geo = embed_geometry([dc.box for dc in sample.dense_captions], sample.image_wh, params.geo_semantic)

    return encode_all(
        v_con, v_geo, s_con, s_geo,
        params.fusion_vs, params.fusion_sv, params.branches,
        cfg.heads, cfg.expand_ratio,
        active_branches=cfg.branches,
        renorm=cfg.renorm_fused_attention,
        trace=trace,
    )


def caption_logits(params: ModelParams, cfg: TrainConfig, branch_outputs, token_ids, trace=None):
    """Logits [T x V] for a BOS-led id sequence against fixed branch outputs."""
    return decoder_forward(
        params.dec_layers, cfg.heads, branch_outputs, params.dec_embed, params.out,
        token_ids, gate_mode=cfg.gate_mode, trace=trace,
    )


def make_step_fn(params: ModelParams, cfg: TrainConfig, branch_outputs):
    """Tapeless `prefix ids -> last-position log-prob row` closure for decoding."""

    def step(prefix_ids):
        with no_grad():
            logits = caption_logits(params, cfg, branch_outputs, prefix_ids)
        return _log_probs(logits.data[-1])

    return step
