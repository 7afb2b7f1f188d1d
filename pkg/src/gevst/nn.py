"""Shared building blocks on top of the tensor engine.

Parameter containers are small dataclasses of Tensors; `named_parameters`
walks any nesting of dataclasses / lists / dicts in declaration order, which
fixes a deterministic global parameter order for init, Adam and checkpoints.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

# Constant tensors reused across calls (never written to).
_CONST_CACHE = {}


def ones_const(rows, cols=1):
    key = ("ones", rows, cols)
    t = _CONST_CACHE.get(key)
    if t is None:
        t = Tensor(np.ones((rows, cols)))
        _CONST_CACHE[key] = t
    return t


def const(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


# ------------------------------------------------------------------- params


@dataclass
class Linear:
    w: Tensor  # [in x out]
    b: Tensor  # [out]


@dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor


@dataclass
class Ffn:
    """Position-wise feed-forward: relu(x W1 + b1) W2 + b2, hidden = 4x width."""

    inner: Linear
    outer: Linear


def init_linear(rng, d_in, d_out):
    limit = np.sqrt(6.0 / (d_in + d_out))
    w = Tensor(rng.uniform(-limit, limit, size=(d_in, d_out)), requires_grad=True)
    b = Tensor(np.zeros(d_out), requires_grad=True)
    return Linear(w, b)


def init_layer_norm(d):
    return LayerNorm(Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))


def init_ffn(rng, d, hidden=None):
    hidden = 4 * d if hidden is None else hidden
    return Ffn(init_linear(rng, d, hidden), init_linear(rng, hidden, d))


def init_embedding(rng, vocab, d):
    return Tensor(rng.normal(0.0, 0.1, size=(vocab, d)), requires_grad=True)


def linear(x, p: Linear):
    return T.affine(x, p.w, p.b)


def ffn(x, p: Ffn):
    return T.affine(T.relu(T.affine(x, p.inner.w, p.inner.b)), p.outer.w, p.outer.b)


def layer_norm(x, p: LayerNorm):
    return T.layer_norm(x, p.gain, p.bias)


def named_parameters(obj, prefix=""):
    """Yield (name, Tensor) pairs in a deterministic declaration order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            if child is None:
                continue
            yield from named_parameters(child, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from named_parameters(child, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for k, child in obj.items():
            yield from named_parameters(child, f"{prefix}.{k}" if prefix else str(k))
    elif obj is None:
        return
    else:
        raise TypeError(f"cannot walk parameters of {type(obj)!r} at {prefix!r}")


def parameters(obj):
    return [t for _, t in named_parameters(obj)]


# ------------------------------------------------------------- head helpers


def split_heads(x, h):
    """[..., n, d] -> [..., h, n, d/h]."""
    shp = x.data.shape
    n, d = shp[-2], shp[-1]
    if d % h != 0:
        raise ShapeError(f"width {d} not divisible by {h} heads")
    dh = d // h
    y = T.reshape(x, shp[:-2] + (n, h, dh))
    perm = tuple(range(len(shp) - 2)) + (len(shp) - 1, len(shp) - 2, len(shp))
    return T.transpose(y, perm)


def merge_heads(x):
    """[..., h, n, dh] -> [..., n, h*dh]."""
    shp = x.data.shape
    h, n, dh = shp[-3], shp[-2], shp[-1]
    perm = tuple(range(len(shp) - 3)) + (len(shp) - 2, len(shp) - 3, len(shp) - 1)
    y = T.transpose(x, perm)
    return T.reshape(y, shp[:-3] + (n, h * dh))


def attention_weights(q, k, h, mask=None):
    """Per-head row-stochastic maps softmax(QK^T / sqrt(d_h)).

    q: [..., n_q, d], k: [..., n_k, d]; returns [..., h, n_q, n_k].
    mask (optional bool array of that shape) marks positions filled with -1e9
    before the softmax.
    """
    dh = q.data.shape[-1] // h
    qh = split_heads(q, h)
    kh = split_heads(k, h)
    ndim = len(kh.data.shape)
    scores = T.mul(T.matmul(qh, T.transpose(kh, tuple(range(ndim - 2)) + (ndim - 1, ndim - 2))), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = T.masked_fill(scores, mask, -1e9)
    return T.softmax(scores)


def apply_attention(weights, v, h):
    """weights: [..., h, n_q, n_k], v: [..., n_k, d] -> [..., n_q, d]."""
    return merge_heads(T.matmul(weights, split_heads(v, h)))


# --------------------------------------------------------------- positions


def sinusoidal_positions(n, d):
    """Fixed sin/cos position table [n x d], cached as a constant tensor."""
    key = ("pe", n, d)
    t = _CONST_CACHE.get(key)
    if t is None:
        pos = np.arange(n, dtype=np.float64)[:, None]
        i = np.arange(d, dtype=np.float64)[None, :]
        angles = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d)
        pe = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
        t = Tensor(pe)
        _CONST_CACHE[key] = t
    return t


# ------------------------------------------------------------ log softmax


def log_softmax(x):
    """Row-wise log softmax for [..., V]; exact and stable.

    The row max is subtracted as a stop-gradient constant; the gradient of
    log-sum-exp is invariant to that shift, so the result is exact.
    """
    shp = x.data.shape
    v = shp[-1]
    if len(shp) != 2:
        x = T.reshape(x, (-1, v))
    xd = x.data
    m = T.Tensor(np.broadcast_to(xd.max(axis=-1, keepdims=True), xd.shape).copy())
    xs = T.sub(x, m)
    e = T.exp(xs)
    row_sum = T.mul(T.mean(e, axis=-1), float(v))
    log_z = T.log(row_sum)
    tiled = T.matmul(T.reshape(log_z, (-1, 1)), ones_const(1, v))
    out = T.sub(xs, tiled)
    if len(shp) != 2:
        out = T.reshape(out, shp)
    return out
