import math

import numpy as np
import pytest

from oracles import bce_direct
from sghfnet.gradcheck import check_gradients
from sghfnet.optim import (Adam, AdamState, NumericalError, adam_step, bce_loss, gan_d_loss, gan_g_loss,
                           gan_source_d_loss, minibatches)
from sghfnet.tensor_engine import ShapeError, Tensor, sigmoid

LN2 = math.log(2.0)


def test_adam_zero_gradient_is_identity():
    w = np.array([1.5, -2.0])
    st = AdamState(lr=0.1)
    adam_step({"w": w}, {"w": np.zeros(2)}, st)
    assert np.array_equal(w, [1.5, -2.0]) and st.t == 1


def test_adam_hand_case():
    w = np.array([1.0])
    adam_step({"w": w}, {"w": 2.0 * w}, AdamState(lr=0.1))
    # m_hat = 2, v_hat = 4 -> w' = 1 - 0.1 * 2 / (2 + eps)
    assert abs(w[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))) <= 1e-15


def test_adam_descends_quadratic():
    w = np.array([1.0])
    st = AdamState(lr=0.1)
    prev = abs(w[0])
    for _ in range(3):
        adam_step({"w": w}, {"w": 2.0 * w}, st)
        assert abs(w[0]) < prev
        prev = abs(w[0])
    assert st.t == 3 and np.all(st.v["w"] >= 0)


def test_adam_zero_lr_is_identity():
    w = np.array([0.3, 0.7])
    for g in (np.array([1.0, -4.0]), np.array([0.5, 2.0])):
        adam_step({"w": w}, {"w": g}, AdamState(lr=0.0))
    assert np.array_equal(w, [0.3, 0.7])


def test_adam_rejects_nan_with_name():
    with pytest.raises(NumericalError, match="kernel"):
        adam_step({"kernel": np.ones(2)}, {"kernel": np.array([1.0, np.nan])}, AdamState())


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState())


def test_adam_wrapper_skips_missing_grads():
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"a": a, "b": b}, lr=0.5)
    a.grad = np.ones(2)
    opt.step()
    assert np.all(a.data < 1.0) and np.array_equal(b.data, np.ones(2))
    opt.zero_grad()
    assert a.grad is None


def test_bce_closed_forms():
    assert float(bce_loss(np.array([1.0]), [1]).data) <= 1e-6
    for y in (0, 1):
        assert abs(float(bce_loss(np.array([0.5]), [y]).data) - LN2) <= 1e-15


def test_bce_matches_direct_sum():
    rng = np.random.default_rng(0)
    p, y = rng.uniform(0, 1, 40), rng.integers(0, 2, 40)
    p[:3] = [0.0, 1.0, 1e-9]
    assert abs(float(bce_loss(p, y).data) - bce_direct(p, y)) <= 1e-12


def test_bce_nonnegative_and_mismatch():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = rng.uniform(0, 1, 10)
        assert float(bce_loss(p, rng.integers(0, 2, 10)).data) >= 0.0
    with pytest.raises(ShapeError):
        bce_loss(np.ones(3) * 0.5, [1, 0])


def test_bce_gradient():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 6)
    assert check_gradients(lambda t: bce_loss(sigmoid(t[0]), y), [rng.standard_normal(6)]) < 1e-4


def test_d_loss_equilibrium_and_optimum():
    half = np.full(4, 0.5)
    assert abs(float(gan_source_d_loss(half, half).data) - 2 * LN2) <= 1e-15
    assert float(gan_source_d_loss(np.ones(4), np.zeros(4)).data) <= 1e-6
    c = np.array([1, 0, 1, 0])
    total = gan_d_loss(half, half, c.astype(float), c.astype(float), c)
    assert abs(float(total.data) - 2 * LN2) <= 1e-6


def test_g_loss_modes():
    half = np.full(3, 0.5)
    c = np.array([1, 0, 1])
    perfect = c.astype(float)
    assert abs(float(gan_g_loss(half, perfect, c, "saturating").data) + LN2) <= 1e-6
    assert abs(float(gan_g_loss(half, perfect, c, "non-saturating").data) - LN2) <= 1e-6
    assert float(gan_g_loss(np.ones(3), perfect, c).data) <= 1e-6
    with pytest.raises(ValueError):
        gan_g_loss(half, perfect, c, "wasserstein")


def test_g_loss_decreases_with_fooling():
    c = np.array([1.0])
    vals = [float(gan_g_loss(np.array([p]), np.array([1.0]), c).data) for p in (0.1, 0.3, 0.6, 0.9)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    x = Tensor(np.array([0.2]), requires_grad=True)
    gan_g_loss(sigmoid(x), np.array([1.0]), c).backward()
    assert x.grad[0] < 0


def test_minibatches_cover_and_fold_tail():
    rng = np.random.default_rng(3)
    bs = minibatches(9, 4, rng, min_size=2)
    assert sorted(np.concatenate(bs).tolist()) == list(range(9))
    assert [len(b) for b in bs] == [4, 5]
