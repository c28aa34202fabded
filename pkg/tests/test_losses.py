"""Hybrid ranking loss terms: frozen hand values, gradients, tape wiring."""

import numpy as np
import pytest

from sfcnext import losses
from sfcnext.softrank import SoftRankConfig
from sfcnext.tensor import NumericsError, ShapeError, Tape, Tensor, backward

YHAT = np.array([10.0, 20.0])
Y = np.array([12.0, 18.0])


def test_mse_example():
    assert losses.mse_loss(YHAT, Y) == pytest.approx(4.0)
    np.testing.assert_allclose(losses.mse_loss_grad(YHAT, Y), [-2.0, 2.0])


def test_mae_fit_example():
    assert losses.mae_fit_loss(YHAT, Y) == pytest.approx(2.0)
    np.testing.assert_allclose(losses.mae_fit_loss_grad(YHAT, Y), [-0.5, 0.5])


def test_age_difference_example():
    assert losses.age_difference_loss(YHAT, Y) == pytest.approx(16.0)


def test_age_difference_expansion_matches_double_loop(rng):
    for _ in range(100):
        n = int(rng.integers(1, 40))
        yhat = rng.uniform(0, 90, n)
        y = rng.uniform(0, 90, n)
        fast = losses.age_difference_loss(yhat, y)
        slow = losses.age_difference_loss_pairs(yhat, y)
        assert abs(fast - slow) < 1e-6 * max(1.0, abs(slow))


def test_age_difference_shift_invariance(rng):
    yhat = rng.uniform(20, 70, 12)
    y = rng.uniform(20, 70, 12)
    a = losses.age_difference_loss(yhat, y)
    b = losses.age_difference_loss(yhat + 5.0, y)
    assert a == pytest.approx(b, rel=1e-12)


def test_hard_rank_loss_example():
    assert losses.srcc_rank_loss_hard([1.0, 2.0, 3.0], [3.0, 1.0, 2.0]) \
        == pytest.approx(6.0)


def test_soft_rank_loss_example():
    val = losses.soft_rank_loss(np.array([1.0, 2.0]), np.array([2.0, 1.0]),
                                SoftRankConfig(epsilon=4.0))
    assert val == pytest.approx(0.390625)


def test_total_loss_example():
    bd = losses.total_loss(YHAT, Y, losses.LossWeights(lambda1=1.0, lambda2=0.0))
    assert bd.total == pytest.approx(20.0)
    assert bd.mse == pytest.approx(4.0)
    assert bd.diff == pytest.approx(16.0)
    assert bd.batch_size == 2


def test_total_loss_zero_weights_reduces_to_fit(rng):
    yhat = rng.uniform(20, 70, 8)
    y = rng.uniform(20, 70, 8)
    bd = losses.total_loss(yhat, y, losses.LossWeights(lambda1=0.0, lambda2=0.0))
    assert bd.total == pytest.approx(losses.mse_loss(yhat, y))
    g = losses.total_loss_grad(yhat, y, losses.LossWeights(0.0, 0.0))
    np.testing.assert_allclose(g, losses.mse_loss_grad(yhat, y))


def test_gradients_match_finite_differences(rng):
    from sfcnext.gradcheck import fd_gradient, rel_error
    cfg = SoftRankConfig(epsilon=1.0)
    for _ in range(10):
        n = int(rng.integers(2, 12))
        y = np.sort(rng.uniform(19, 72, n)) + np.arange(n)
        yhat = y + rng.normal(0, 2, n)
        for f, gf in [
            (losses.mse_loss, losses.mse_loss_grad),
            (losses.age_difference_loss, losses.age_difference_loss_grad),
            (lambda v, t: losses.soft_rank_loss(v, t, cfg),
             lambda v, t: losses.soft_rank_loss_grad(v, t, cfg)),
        ]:
            num = fd_gradient(lambda v: f(v, y), yhat.copy(), h=1e-5)
            assert rel_error(gf(yhat, y), num) < 1e-4


def test_hybrid_loss_backpropagates(rng):
    y = np.array([25.0, 40.0, 60.0])
    pred = Tensor(np.array([30.0, 35.0, 55.0], dtype=np.float32),
                  requires_grad=True)
    with Tape() as tape:
        out, bd = losses.hybrid_loss(pred, y)
    backward(tape, out)
    expected = losses.total_loss_grad(pred.data, y)
    np.testing.assert_allclose(pred.grad, expected, rtol=1e-5)
    assert bd.total == pytest.approx(out.item())


def test_hybrid_loss_raises_on_nonfinite():
    pred = Tensor(np.array([np.nan, 1.0], dtype=np.float32), requires_grad=True)
    with pytest.raises(NumericsError):
        losses.hybrid_loss(pred, np.array([1.0, 2.0]))
    with pytest.raises(TypeError):
        losses.hybrid_loss(np.zeros(2), np.zeros(2))


def test_shape_validation():
    with pytest.raises(ShapeError):
        losses.mse_loss([1.0], [1.0, 2.0])
    with pytest.raises(ShapeError):
        losses.total_loss(np.array([]), np.array([]))
    with pytest.raises(ValueError):
        losses.LossWeights(lambda1=-0.1)
