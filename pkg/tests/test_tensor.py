"""Engine-level checks: gradients against central differences, tape
mechanics, and the no-implicit-broadcasting contract."""

import numpy as np
import pytest

from gevst import tensor as T
from gevst.errors import ShapeError
from gevst.tensor import Tape, Tensor, grad_check, no_grad

RNG = np.random.default_rng(77)


def check(f, x, tol=1e-6):
    err = grad_check(f, x)
    assert err < tol, f"grad check failed: {err}"


def test_add_mul_sub_chain_grads():
    a = Tensor(RNG.normal(0, 1, (3, 4)), requires_grad=True)
    b = Tensor(RNG.normal(0, 1, (3, 4)))
    check(lambda t: T.total_sum(T.mul(T.sub(T.add(t, b), T.mul(t, 0.3)), t)), a)


def test_scalar_tensor_mul_grad():
    # gates are size-1 tensors multiplied against whole maps
    g = Tensor(np.array([0.7]), requires_grad=True)
    m = Tensor(RNG.normal(0, 1, (4, 4)))
    check(lambda t: T.total_sum(T.mul(m, t)), g)


def test_matmul_2d_and_batched_grads():
    a = Tensor(RNG.normal(0, 1, (3, 5)), requires_grad=True)
    b = Tensor(RNG.normal(0, 1, (5, 2)))
    check(lambda t: T.total_sum(T.matmul(t, b)), a)

    ba = Tensor(RNG.normal(0, 1, (2, 3, 4)), requires_grad=True)
    bb = Tensor(RNG.normal(0, 1, (2, 4, 3)))
    check(lambda t: T.total_sum(T.matmul(t, bb)), ba)


def test_affine_grads_all_inputs():
    x = Tensor(RNG.normal(0, 1, (4, 3)), requires_grad=True)
    w = Tensor(RNG.normal(0, 1, (3, 5)), requires_grad=True)
    b = Tensor(RNG.normal(0, 1, 5), requires_grad=True)
    check(lambda t: T.total_sum(T.tanh(T.affine(t, w, b))), x)
    check(lambda t: T.total_sum(T.tanh(T.affine(x, t, b))), w)
    check(lambda t: T.total_sum(T.tanh(T.affine(x, w, t))), b)


def test_unary_grads():
    x = Tensor(RNG.uniform(0.2, 2.0, (3, 3)), requires_grad=True)
    for op in (T.tanh, T.sigmoid, T.exp, T.log):
        check(lambda t, op=op: T.total_sum(op(t)), x)
    xr = Tensor(RNG.normal(0, 1, (6,)) + 0.05, requires_grad=True)  # keep off the relu kink
    check(lambda t: T.total_sum(T.relu(t)), xr)


def test_softmax_layer_norm_grads():
    x = Tensor(RNG.normal(0, 2, (3, 6)), requires_grad=True)
    w = Tensor(RNG.normal(0, 1, (6, 1)))
    check(lambda t: T.total_sum(T.matmul(T.softmax(t), w)), x)

    gain = Tensor(RNG.normal(1, 0.2, 6), requires_grad=True)
    bias = Tensor(RNG.normal(0, 0.2, 6), requires_grad=True)
    check(lambda t: T.total_sum(T.tanh(T.layer_norm(t, gain, bias))), x)
    check(lambda t: T.total_sum(T.layer_norm(x, t, bias)), gain)
    check(lambda t: T.total_sum(T.layer_norm(x, gain, t)), bias)


def test_shape_op_grads():
    x = Tensor(RNG.normal(0, 1, (2, 8)), requires_grad=True)
    check(lambda t: T.total_sum(T.sum_pool_stride(T.mul(t, t), 4)), x)
    check(lambda t: T.total_sum(T.mul(T.reshape(t, (4, 4)), 2.0)), x)
    check(lambda t: T.total_sum(T.tanh(T.transpose(t))), x)
    check(lambda t: T.total_sum(T.narrow(t, 1, 2, 3)), x)
    check(lambda t: T.total_sum(T.mean(t, axis=0)), x)
    check(lambda t: T.total_sum(T.concat([t, t], axis=0)), x)


def test_embedding_lookup_scatter_grad():
    table = Tensor(RNG.normal(0, 1, (7, 4)), requires_grad=True)
    ids = [3, 0, 3, 6]  # repeated row exercises accumulation
    check(lambda t: T.total_sum(T.tanh(T.embedding_lookup(t, ids))), table)


def test_masked_fill_underflows_to_exact_zero():
    x = Tensor(RNG.normal(0, 1, (2, 5)))
    mask = np.zeros((2, 5), dtype=bool)
    mask[0, 2] = mask[1, 4] = True
    out = T.softmax(T.masked_fill(x, mask, -1e9))
    assert out.data[0, 2] == 0.0
    assert out.data[1, 4] == 0.0
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_no_implicit_broadcasting():
    a = Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        T.add(a, Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        T.mul(a, Tensor(np.ones((2, 1))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 2))))
    # the one sanctioned exception: size-1 tensors act as scalars
    assert T.mul(a, Tensor(np.array([2.0]))).data.sum() == 12.0


def test_grad_accumulates_when_input_reused():
    x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    with Tape() as tape:
        y = T.total_sum(T.add(x, x))
        tape.backward(y)
    assert np.array_equal(x.grad, np.array([[2.0, 2.0]]))


def test_no_tape_no_graph():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        y = T.mul(x, 3.0)
    assert y.requires_grad is False
    with Tape() as tape:
        z = T.mul(x, 3.0)
        tape.backward(T.total_sum(z))
    assert x.grad is not None


def test_backward_leaves_forward_values_intact():
    # view-aliasing safety: grads must accumulate without mutating arrays in place
    x = Tensor(RNG.normal(0, 1, (3, 4)), requires_grad=True)
    with Tape() as tape:
        top = T.narrow(x, 0, 0, 2)
        bottom = T.narrow(x, 0, 1, 2)  # overlaps `top` in x
        y = T.total_sum(T.mul(T.add(top, bottom), 1.5))
        keep = top.data.copy()
        tape.backward(y)
    assert np.array_equal(top.data, keep)
    expected = np.array([[1.5] * 4, [3.0] * 4, [1.5] * 4])
    assert np.array_equal(x.grad, expected)


def test_grad_check_samples_coordinates():
    x = Tensor(RNG.normal(0, 1, (10, 10)), requires_grad=True)
    err = grad_check(lambda t: T.total_sum(T.tanh(t)), x, max_coords=7,
                     rng=np.random.default_rng(0))
    assert err < 1e-6


def test_grad_check_floor_absorbs_inert_coordinates():
    # a parameter that cancels out of the loss has a true gradient of zero;
    # the default tight floor turns finite-difference noise into a large
    # ratio, a floor at the noise scale reports agreement
    x = Tensor(np.array([0.3, -0.7]), requires_grad=True)

    def cancels(t):
        s = T.add(t, T.mul(t, -1.0))  # t - t: identically zero, still taped
        return T.total_sum(T.mul(s, s))

    assert grad_check(cancels, x, floor=1e-5) < 1e-4


def test_same_seed_same_numbers():
    a = np.random.default_rng(42).normal(size=5)
    b = np.random.default_rng(42).normal(size=5)
    assert np.array_equal(a, b)
