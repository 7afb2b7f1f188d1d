"""Minimal reverse-mode differentiable tensor engine.

Design constraints, fixed for the whole package:
  * every value is float64, stored row-major (C order) in a numpy array;
  * no implicit broadcasting between tensors except scalars (size-1 tensors
    and python numbers); row-wise bias broadcast exists only INSIDE the fused
    affine and layer_norm kernels;
  * forward ops execute eagerly; when a Tape is active and an input requires
    grad, the op appends one node to the tape. Backward replays nodes in exact
    reverse recording order, which is a valid reverse topological order because
    recording order is execution order.

Gradients accumulate into Tensor.grad (never mutated in place, so aliasing
views returned by backward rules are safe).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, ShapeError, VocabularyError

_STATE = threading.local()


def _tape():
    return getattr(_STATE, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @staticmethod
    def _wrap(arr, requires_grad=False):
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(())[()])

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(mul(self, -1.0), -float(other)) if not isinstance(other, Tensor) else sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records ops in execution order; backward walks them reversed.

    Single-threaded per instance: a Tape must never be shared across
    concurrently recording callers (the active-tape slot is thread-local).
    """

    __slots__ = ("nodes", "_prev")

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        self._prev = _tape()
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = self._prev
        return False

    def backward(self, loss):
        if not isinstance(loss, Tensor):
            raise ContractError("backward target must be a Tensor")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for out, inputs, bwd in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = bwd(g)
            for t, gt in zip(inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                t.grad = gt if t.grad is None else t.grad + gt


@contextmanager
def no_grad():
    prev = _tape()
    _STATE.tape = None
    try:
        yield
    finally:
        _STATE.tape = prev


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def _emit(data, inputs, bwd):
    """Wrap data; record a node when a tape is live and some input needs grad."""
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor._wrap(data, True)
        tape.nodes.append((out, inputs, bwd))
        return out
    return Tensor._wrap(data)


# ---------------------------------------------------------------- binary ops


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul shapes incompatible: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bwd(g):
        ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
        gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), bwd)


def affine(x, w, b):
    """x @ w + b with the bias broadcast over rows, as one fused op.

    x: [..., K], w: [K, N], b: [N].
    """
    xd, wd, bb = x.data, w.data, b.data
    if xd.ndim < 2 or wd.ndim != 2 or bb.ndim != 1:
        raise ShapeError(f"affine needs x[...,K], w[K,N], b[N]; got {xd.shape}, {wd.shape}, {bb.shape}")
    if xd.shape[-1] != wd.shape[0] or wd.shape[1] != bb.shape[0]:
        raise ShapeError(f"affine shapes incompatible: {xd.shape} @ {wd.shape} + {bb.shape}")
    out = xd @ wd + bb

    def bwd(g):
        gx = g @ wd.T if x.requires_grad else None
        if w.requires_grad:
            gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gw = None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _emit(out, (x, w, b), bwd)


def _scalar_pair(a, b, opname):
    """Classify an elementwise operand pair. Returns 'same', 'bscalar' or 'ascalar'."""
    if a.data.shape == b.data.shape:
        return "same"
    if b.data.size == 1:
        return "bscalar"
    if a.data.size == 1:
        return "ascalar"
    raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} differ and neither is scalar")


def add(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return _emit(a.data + s, (a,), lambda g: (g,))
    kind = _scalar_pair(a, b, "add")
    if kind == "same":
        return _emit(a.data + b.data, (a, b), lambda g: (g, g))
    if kind == "bscalar":
        out = a.data + b.data.reshape(())

        def bwd(g):
            ga = g if a.requires_grad else None
            gb = g.sum().reshape(b.data.shape) if b.requires_grad else None
            return ga, gb

        return _emit(out, (a, b), bwd)
    out = a.data.reshape(()) + b.data

    def bwd(g):
        ga = g.sum().reshape(a.data.shape) if a.requires_grad else None
        gb = g if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), bwd)


def sub(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return _emit(a.data - s, (a,), lambda g: (g,))
    kind = _scalar_pair(a, b, "sub")
    if kind == "same":
        return _emit(a.data - b.data, (a, b), lambda g: (g, -g))
    if kind == "bscalar":
        out = a.data - b.data.reshape(())

        def bwd(g):
            ga = g if a.requires_grad else None
            gb = -g.sum().reshape(b.data.shape) if b.requires_grad else None
            return ga, gb

        return _emit(out, (a, b), bwd)
    out = a.data.reshape(()) - b.data

    def bwd(g):
        ga = g.sum().reshape(a.data.shape) if a.requires_grad else None
        gb = -g if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), bwd)


def mul(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return _emit(a.data * s, (a,), lambda g: (g * s,))
    kind = _scalar_pair(a, b, "mul")
    ad, bd = a.data, b.data
    if kind == "same":

        def bwd(g):
            ga = g * bd if a.requires_grad else None
            gb = g * ad if b.requires_grad else None
            return ga, gb

        return _emit(ad * bd, (a, b), bwd)
    if kind == "bscalar":
        bs = bd.reshape(())

        def bwd(g):
            ga = g * bs if a.requires_grad else None
            gb = (g * ad).sum().reshape(bd.shape) if b.requires_grad else None
            return ga, gb

        return _emit(ad * bs, (a, b), bwd)
    as_ = ad.reshape(())

    def bwd(g):
        ga = (g * bd).sum().reshape(ad.shape) if a.requires_grad else None
        gb = g * as_ if b.requires_grad else None
        return ga, gb

    return _emit(as_ * bd, (a, b), bwd)


# ----------------------------------------------------------------- unary ops


def tanh(x):
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x):
    keep = x.data > 0.0
    return _emit(np.where(keep, x.data, 0.0), (x,), lambda g: (np.where(keep, g, 0.0),))


def log(x):
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x):
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


# ------------------------------------------------------------ softmax / norm


def softmax(x):
    """Softmax over the last axis, max-subtracted for stability."""
    xd = x.data
    if xd.ndim < 1 or xd.shape[-1] == 0:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {xd.shape}")
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then gain*x + bias.

    Population variance; eps sits inside the square root. Feature axis must
    have length >= 2 so the variance is defined.
    """
    xd = x.data
    d = xd.shape[-1] if xd.ndim else 0
    if d < 2:
        raise ShapeError(f"layer_norm needs a feature axis of length >= 2, got shape {xd.shape}")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be [{d}], got {gain.data.shape}, {bias.data.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        flat_g = g.reshape(-1, d)
        ggain = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gbias = flat_g.sum(axis=0) if bias.requires_grad else None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        else:
            gx = None
        return gx, ggain, gbias

    return _emit(out, (x, gain, bias), bwd)


# ------------------------------------------------------- shape / reductions


def sum_pool_stride(x, stride):
    """Sum consecutive groups of `stride` entries along the last axis."""
    xd = x.data
    if stride < 1 or xd.ndim < 1 or xd.shape[-1] % stride != 0:
        raise ShapeError(f"sum_pool_stride: last axis {xd.shape} not divisible by stride {stride}")
    lead = xd.shape[:-1]
    out_w = xd.shape[-1] // stride
    out = xd.reshape(*lead, out_w, stride).sum(axis=-1)
    return _emit(out, (x,), lambda g: (np.repeat(g, stride, axis=-1),))


def mean(x, axis=None):
    xd = x.data
    if axis is None:
        n = xd.size
        return _emit(xd.mean(), (x,), lambda g: (np.broadcast_to(g / n, xd.shape),))
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {xd.shape}")
    ax = axis % xd.ndim
    n = xd.shape[ax]
    out = xd.mean(axis=ax)
    return _emit(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g / n, ax), xd.shape),))


def total_sum(x):
    xd = x.data
    return _emit(xd.sum(), (x,), lambda g: (np.broadcast_to(g, xd.shape),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit(out, tuple(tensors), bwd)


def narrow(x, axis, start, size):
    """Contiguous slice [start, start+size) along one axis."""
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for shape {xd.shape}")
    ax = axis % xd.ndim
    if start < 0 or size < 0 or start + size > xd.shape[ax]:
        raise ShapeError(f"narrow: [{start}, {start + size}) outside axis {ax} of shape {xd.shape}")
    idx = tuple(slice(None) if i != ax else slice(start, start + size) for i in range(xd.ndim))
    out = xd[idx]

    def bwd(g):
        z = np.zeros_like(xd)
        z[idx] = g
        return (z,)

    return _emit(out, (x,), bwd)


def reshape(x, shape):
    xd = x.data
    out = xd.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(xd.shape),))


def transpose(x, axes=None):
    xd = x.data
    if axes is None:
        if xd.ndim != 2:
            raise ShapeError(f"transpose without axes needs a 2-d tensor, got shape {xd.shape}")
        axes = (1, 0)
    axes = tuple(a % xd.ndim for a in axes)
    if sorted(axes) != list(range(xd.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of axes of shape {xd.shape}")
    inv = np.argsort(axes)
    return _emit(xd.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def masked_fill(x, mask, value):
    """Replace entries where mask is True with a constant. Mask is a plain bool array."""
    xd = x.data
    m = np.asarray(mask, dtype=bool)
    if m.shape != xd.shape:
        raise ShapeError(f"masked_fill: mask shape {m.shape} != tensor shape {xd.shape}")
    v = float(value)
    out = np.where(m, v, xd)
    return _emit(out, (x,), lambda g: (np.where(m, 0.0, g),))


def embedding_lookup(table, ids):
    """Rows of a [V x d] table selected by integer ids; grads scatter-add."""
    td = table.data
    if td.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got shape {td.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-d, got shape {idx.shape}")
    v = td.shape[0]
    bad = (idx < 0) | (idx >= v)
    if bad.any():
        offender = int(idx[bad][0])
        raise VocabularyError(f"token id {offender} outside vocabulary of size {v}")
    out = td[idx]

    def bwd(g):
        z = np.zeros_like(td)
        np.add.at(z, idx, g)
        return (z,)

    return _emit(out, (table,), bwd)


# ------------------------------------------------------------- verification


def grad_check(f, x, eps=1e-5, max_coords=None, rng=None, floor=1e-8):
    """Compare reverse-mode d f/d x against central differences.

    f maps the Tensor x (and whatever it closes over) to a scalar Tensor.
    Relative error per coordinate is |a - n| / max(|a|, |n|, floor); the max
    over checked coordinates is returned. max_coords samples that many
    coordinates with rng instead of sweeping all of them.

    floor turns the ratio into an absolute comparison for coordinates whose
    gradient is near zero (an attention key bias, say, cancels inside softmax
    and backs an exactly-zero gradient): there the difference |a - n| is pure
    finite-difference noise and dividing by it would measure nothing.
    """
    if not x.requires_grad:
        raise ContractError("grad_check target must require grad")
    x.grad = None
    with Tape() as tape:
        y = f(x)
        if y.data.size != 1:
            raise ContractError(f"grad_check needs a scalar-valued f, got shape {y.data.shape}")
        tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    aflat = analytic.reshape(-1)
    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = range(n)
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = aflat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if rel > worst:
                worst = rel
    return worst
