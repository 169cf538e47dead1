import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import conv_loop, matmul_loop
from sghfnet import kernels
from sghfnet.gradcheck import check_gradients
from sghfnet.tensor_engine import (ShapeError, Tensor, concat, conv, exp, log, matmul, no_grad, relu, sigmoid,
                                   softmax, tsum)


def rnd(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


# -- matmul ------------------------------------------------------------------------------


def test_matmul_identity():
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(matmul(np.eye(2), b).data, b)


def test_matmul_hand_case():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_matches_triple_loop():
    a, b = rnd(0, 7, 5), rnd(1, 5, 3)
    assert np.max(np.abs(matmul(a, b).data - matmul_loop(a, b))) <= 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradients():
    err = check_gradients(lambda t: tsum(matmul(t[0], t[1]) * matmul(t[0], t[1])), [rnd(2, 4, 3), rnd(3, 3, 2)])
    assert err < 1e-4


# -- conv --------------------------------------------------------------------------------


def test_conv_identity_kernel():
    x = rnd(4, 1, 2, 4, 4, 3)
    k = np.zeros((2, 2, 1, 1, 1))
    k[0, 0] = k[1, 1] = 1.0
    assert np.array_equal(conv(x, k).data, x)


def test_conv_zero_kernel():
    out = conv(rnd(5, 1, 1, 4, 4, 4), np.zeros((2, 1, 3, 3, 3)), padding=1)
    assert not out.data.any()


def test_conv3d_matches_loop_oracle():
    x, k = rnd(6, 1, 1, 4, 4, 4), rnd(7, 2, 1, 3, 3, 3)
    assert np.max(np.abs(conv(x, k).data - conv_loop(x, k))) <= 1e-12


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0), ((1, 2, 1), (0, 1, 1))])
def test_conv3d_strided_padded(stride, padding):
    x, k = rnd(8, 2, 2, 5, 4, 6), rnd(9, 3, 2, 3, 2, 3)
    assert np.max(np.abs(conv(x, k, stride=stride, padding=padding).data
                         - conv_loop(x, k, stride, padding))) <= 1e-12


def test_conv2d_matches_loop_oracle():
    x, k = rnd(10, 2, 3, 6, 5), rnd(11, 4, 3, 3, 3)
    assert np.max(np.abs(conv(x, k, stride=2, padding=1).data - conv_loop(x, k, 2, 1))) <= 1e-12


def test_conv_output_size():
    out = conv(np.zeros((1, 1, 9, 8, 7)), np.zeros((1, 1, 3, 3, 3)), stride=2, padding=1)
    assert out.shape == (1, 1, 5, 4, 4)


def test_conv_errors():
    with pytest.raises(ShapeError):
        conv(np.zeros((1, 1, 2, 2, 2)), np.zeros((1, 1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3, 3)))


def test_conv_gradients():
    x, k, b = rnd(12, 2, 2, 4, 3, 4), rnd(13, 3, 2, 3, 2, 3), rnd(14, 3)
    err = check_gradients(lambda t: tsum(sigmoid(conv(t[0], t[1], t[2], stride=(2, 1, 1), padding=1))), [x, k, b])
    assert err < 1e-4


def test_conv_backends_bitwise_equal():
    if "cython" not in kernels.available_backends():
        pytest.skip("compiled kernels not built")
    x, k = rnd(15, 2, 3, 6, 5, 4), rnd(16, 4, 3, 3, 3, 3)
    outs = []
    for backend in ("cython", "python"):
        prev = kernels.set_backend(backend)
        try:
            xt = Tensor(x, requires_grad=True)
            kt = Tensor(k, requires_grad=True)
            y = conv(xt, kt, stride=2, padding=1)
            tsum(y * y).backward()
            outs.append((y.data, xt.grad, kt.grad))
        finally:
            kernels.set_backend(prev)
    for a, b in zip(*outs):
        assert np.array_equal(a, b)


# -- softmax / concat / elementwise ------------------------------------------------------


def test_softmax_closed_forms():
    assert np.allclose(softmax(np.array([2.0, 2.0, 2.0])).data, 1 / 3, atol=1e-15)
    assert softmax(np.array([7.0])).data[0] == 1.0
    assert np.max(np.abs(softmax(np.array([0.0, math.log(2.0)])).data - [1 / 3, 2 / 3])) < 1e-15


def test_softmax_large_logits_stable():
    out = softmax(np.array([1000.0, 1000.0, -1000.0])).data
    assert np.all(np.isfinite(out)) and abs(out[0] - 0.5) < 1e-15


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-50, 50), st.integers(0, 1))
def test_softmax_sums_to_one_and_shift_invariant(x, c, axis):
    a = softmax(x, axis=axis).data
    assert np.max(np.abs(a.sum(axis=axis) - 1.0)) <= 1e-12
    assert np.max(np.abs(softmax(x + c, axis=axis).data - a)) <= 1e-12


def test_concat_values_and_shapes():
    assert np.array_equal(concat([np.array([1.0, 2.0]), np.array([3.0])]).data, [1.0, 2.0, 3.0])
    assert concat([np.zeros((2, 8)), np.zeros((2, 8))], axis=1).shape == (2, 16)
    with pytest.raises(ShapeError):
        concat([np.zeros((2, 3)), np.zeros((3, 3))], axis=1)


def test_concat_backward_routes_ones():
    a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(3), requires_grad=True)
    tsum(concat([a, b])).backward()
    assert np.array_equal(a.grad, np.ones(2)) and np.array_equal(b.grad, np.ones(3))


def test_backward_closed_forms():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    tsum(x).backward()
    assert np.array_equal(x.grad, np.ones(3))
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tsum(x * x).backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_deterministic():
    def run():
        a = Tensor(rnd(20, 4, 5), requires_grad=True)
        w = Tensor(rnd(21, 5, 3), requires_grad=True)
        loss = tsum(softmax(matmul(relu(a), w), axis=1) * rnd(22, 4, 3))
        loss.backward()
        return a.grad.tobytes() + w.grad.tobytes()

    assert run() == run()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    tsum(y + y * x).backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert np.allclose(x.grad, [2 * 3 + 3 * 9])


def test_elementwise_shape_rule():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    out = Tensor(np.ones((4, 3))) + Tensor(np.arange(3.0))  # bias over the batch axis
    assert out.shape == (4, 3)


@pytest.mark.parametrize("name", ["exp", "log", "relu", "sigmoid", "div", "getitem", "transpose", "mean"])
def test_unary_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4))
    fns = {
        "exp": lambda t: tsum(exp(t[0])),
        "log": lambda t: tsum(log(t[0] * t[0])),
        "relu": lambda t: tsum(relu(t[0]) * relu(t[0])),
        "sigmoid": lambda t: tsum(sigmoid(t[0]) * t[0]),
        "div": lambda t: tsum(1.0 / (t[0] * t[0] + 1.0)),
        "getitem": lambda t: tsum(t[0][1:, ::2] * t[0][1:, ::2]),
        "transpose": lambda t: tsum(matmul(t[0].transpose(), t[0])),
        "mean": lambda t: tsum(t[0].mean(axis=0) * t[0].mean(axis=0)),
    }
    assert check_gradients(fns[name], [x]) < 1e-4
