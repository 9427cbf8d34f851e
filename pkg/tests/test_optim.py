import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emobev.optim import (
    Adam,
    AdamState,
    PolySchedule,
    adam_step,
    cross_entropy_2class,
    masked_bce_logits,
    mse_loss,
    schedule_lr,
)
from emobev.tensor import NumericalError, ShapeError, Tensor, backward, grad_check


def reference_adam(p, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_zero_gradient_leaves_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState(lr0=0.1)
    for _ in range(5):
        adam_step(state, [p], [np.zeros(2)])
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude_is_lr():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    adam_step(AdamState(lr0=0.01), [p], [np.array([3.0, -1e-3])])
    assert np.allclose(np.abs(p.data), 0.01, rtol=1e-4)


def test_adam_minimizes_quadratic_like_reference():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        p.grad = 2 * p.data
        opt.step()
    ref = reference_adam(1.0, lambda x: 2 * x, 0.1, 200)
    assert abs(p.data[0]) < 0.05
    assert abs(p.data[0] - ref) < 1e-12


def test_adam_zero_lr_leaves_parameters():
    p = Tensor(np.array([0.5]), requires_grad=True)
    adam_step(AdamState(lr0=0.1), [p], [np.array([1.0])], lr_t=0.0)
    assert p.data[0] == 0.5


def test_adam_errors():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(NumericalError):
        adam_step(AdamState(lr0=0.1), [p], [np.array([np.nan, 0.0])])
    with pytest.raises(ShapeError):
        adam_step(AdamState(lr0=0.1), [p], [np.ones(3)])


def test_schedule_examples():
    s = PolySchedule(lr0=0.1, total_steps=100)
    assert schedule_lr(s, 0) == 0.1
    assert schedule_lr(s, 100) == 0.0
    assert math.isclose(schedule_lr(s, 50), 0.05)
    assert schedule_lr(PolySchedule(0.1, 10, floor_lr=0.01), 20) == 0.01
    with pytest.raises(ValueError):
        schedule_lr(PolySchedule(0.1, 0), 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 3.0), st.integers(1, 200), st.integers(0, 250))
def test_schedule_non_increasing(power, total, t):
    s = PolySchedule(1e-3, total, power)
    assert schedule_lr(s, t + 1) <= schedule_lr(s, t)


def test_mse_examples():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 6)))
    assert mse_loss(x, x).data == 0.0
    assert mse_loss(Tensor(x.data + 1), x).data == pytest.approx(1.0)
    pred = Tensor([[0.0, 3.0, 1.0, 1.0, 1.0, 1.0]])
    assert mse_loss(pred, Tensor(np.ones((1, 6)))).data == pytest.approx(5 / 6, abs=1e-15)
    with pytest.raises(ShapeError):
        mse_loss(pred, Tensor(np.ones((2, 6))))


def naive_ce(z, y):
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return -np.mean(np.log(p[np.arange(len(y)), y]))


def test_cross_entropy_examples():
    assert cross_entropy_2class(Tensor([[0.3, 0.3]]), [1]).data == pytest.approx(math.log(2))
    assert cross_entropy_2class(Tensor([[20.0, 0.0]]), [0]).data < 1e-8
    rng = np.random.default_rng(1)
    z, y = rng.normal(size=(16, 2)) * 3, rng.integers(0, 2, 16)
    assert abs(cross_entropy_2class(Tensor(z), y).data - naive_ce(z, y)) < 1e-10
    assert np.isfinite(cross_entropy_2class(Tensor([[1000.0, -1000.0]]), [1]).data)


def test_masked_bce_examples():
    mask = np.array([[True, False, False, False, False]])
    loss = masked_bce_logits(Tensor(np.zeros((1, 5))), np.array([[1, 0, 0, 0, 0]]), mask)
    assert loss.data == pytest.approx(math.log(2))
    for labels in ([0, 1, 0, 1, 1], [1, 1, 1, 1, 1]):
        l2 = masked_bce_logits(Tensor(np.zeros((1, 5))), np.array([labels]), np.ones((1, 5), bool))
        assert l2.data == pytest.approx(math.log(2))


def test_masked_bce_ignores_masked_entries():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(4, 5))
    y = rng.integers(0, 2, (4, 5)).astype(float)
    mask = rng.random((4, 5)) < 0.5
    mask[:, 0] = True
    base = masked_bce_logits(Tensor(z), y, mask).data
    z2, y2 = z.copy(), y.copy()
    z2[~mask] = rng.normal(size=(~mask).sum()) * 100
    z2[~mask][:1] = np.nan
    y2[~mask] = np.nan
    assert masked_bce_logits(Tensor(z2), y2, mask).data == base
    zt = Tensor(z, requires_grad=True)
    backward(masked_bce_logits(zt, y, mask))
    assert np.all(zt.grad[~mask] == 0.0)


def test_masked_bce_all_masked_raises():
    with pytest.raises(ValueError):
        masked_bce_logits(Tensor(np.zeros((2, 5))), np.zeros((2, 5)), np.zeros((2, 5), bool))


def test_loss_grad_checks():
    rng = np.random.default_rng(3)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pred, tgt = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6)))
        assert grad_check(lambda t: mse_loss(t, tgt), pred) < 1e-4
        z, y = Tensor(rng.normal(size=(5, 2))), rng.integers(0, 2, 5)
        assert grad_check(lambda t: cross_entropy_2class(t, y), z) < 1e-4
        zb = Tensor(rng.normal(size=(3, 5)))
        yb = rng.integers(0, 2, (3, 5))
        mb = rng.random((3, 5)) < 0.6
        mb[0, 0] = True
        assert grad_check(lambda t: masked_bce_logits(t, yb, mb), zb) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=5, max_size=5), st.lists(st.integers(0, 1), min_size=5, max_size=5))
def test_losses_non_negative(z, y):
    z = np.array([z])
    assert masked_bce_logits(Tensor(z), np.array([y]), np.ones((1, 5), bool)).data >= 0
    assert cross_entropy_2class(Tensor(z[:, :2]), y[:1]).data >= 0
