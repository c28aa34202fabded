"""Hybrid Ranking Loss: squared-error term, age-difference term, soft-rank term.

Plain-array functions return floats (with companion ``*_grad`` functions for
the gradient w.r.t. the predictions); ``hybrid_loss`` wraps the weighted total
as a tape op so it backpropagates through a model's prediction tensor.
"""

from dataclasses import dataclass

import numpy as np

from .softrank import SoftRankConfig, hard_rank, soft_rank, soft_rank_vjp
from .tensor import NumericsError, ShapeError, Tensor, _record


@dataclass
class LossWeights:
    lambda1: float = 0.1   # age-difference term
    lambda2: float = 1.0   # soft-rank term

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    mse: float      # primary fit term (squared error, or absolute error in the MAE variant)
    diff: float
    rank: float
    total: float
    batch_size: int


def _check_pair(yhat, y, name):
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if yhat.size != y.size:
        raise ShapeError(f"{name}: length mismatch {yhat.size} vs {y.size}")
    if yhat.size == 0:
        raise ShapeError(f"{name}: empty batch")
    return yhat, y


def mse_loss(yhat, y):
    yhat, y = _check_pair(yhat, y, "mse_loss")
    return float(((yhat - y) ** 2).mean())


def mse_loss_grad(yhat, y):
    yhat, y = _check_pair(yhat, y, "mse_loss")
    return 2.0 * (yhat - y) / yhat.size


def mae_fit_loss(yhat, y):
    """Mean absolute error fit term (the sweep's MAE-loss variant)."""
    yhat, y = _check_pair(yhat, y, "mae_fit_loss")
    return float(np.abs(yhat - y).mean())


def mae_fit_loss_grad(yhat, y):
    yhat, y = _check_pair(yhat, y, "mae_fit_loss")
    return np.sign(yhat - y) / yhat.size


def age_difference_loss(yhat, y):
    """Mean over all ordered pairs (i,j), i=j included, of the squared
    difference between predicted and true age gaps, divided by the batch size.

    Computed in O(N) via sum_ij (d_i - d_j)^2 = 2N sum d^2 - 2 (sum d)^2
    with d = yhat - y.
    """
    yhat, y = _check_pair(yhat, y, "age_difference_loss")
    d = yhat - y
    n = d.size
    return float(2.0 * (d * d).sum() - 2.0 * d.sum() ** 2 / n)


def age_difference_loss_grad(yhat, y):
    yhat, y = _check_pair(yhat, y, "age_difference_loss")
    d = yhat - y
    n = d.size
    return 4.0 * d - 4.0 * d.sum() / n


def age_difference_loss_pairs(yhat, y):
    """Literal O(N^2) double loop; oracle for the fast expansion."""
    yhat, y = _check_pair(yhat, y, "age_difference_loss")
    n = yhat.size
    acc = 0.0
    for i in range(n):
        for j in range(n):
            acc += ((yhat[i] - yhat[j]) - (y[i] - y[j])) ** 2
    return acc / n


def srcc_rank_loss_hard(yhat, y):
    """Sum of squared hard-rank differences; diagnostic only, not differentiable."""
    yhat, y = _check_pair(yhat, y, "srcc_rank_loss_hard")
    d = hard_rank(yhat) - hard_rank(y)
    return float((d.astype(np.float64) ** 2).sum())


def soft_rank_loss(yhat, y, config=None):
    """Mean squared gap between soft ranks of yhat and hard ranks of y."""
    if config is None:
        config = SoftRankConfig()
    yhat, y = _check_pair(yhat, y, "soft_rank_loss")
    r = soft_rank(yhat, config).ranks
    t = hard_rank(y).astype(np.float64)
    return float(((r - t) ** 2).mean())


def soft_rank_loss_grad(yhat, y, config=None):
    if config is None:
        config = SoftRankConfig()
    yhat, y = _check_pair(yhat, y, "soft_rank_loss")
    res = soft_rank(yhat, config)
    t = hard_rank(y).astype(np.float64)
    upstream = 2.0 * (res.ranks - t) / yhat.size
    return soft_rank_vjp(res, upstream, config.epsilon)


def total_loss(yhat, y, weights=None, config=None, primary="mse"):
    """All three terms and their weighted total (components computed once)."""
    if weights is None:
        weights = LossWeights()
    if config is None:
        config = SoftRankConfig()
    yhat, y = _check_pair(yhat, y, "total_loss")
    fit = mae_fit_loss(yhat, y) if primary == "mae" else mse_loss(yhat, y)
    diff = age_difference_loss(yhat, y)
    rank = soft_rank_loss(yhat, y, config)
    total = fit + weights.lambda1 * diff + weights.lambda2 * rank
    return LossBreakdown(mse=fit, diff=diff, rank=rank, total=total,
                         batch_size=yhat.size)


def total_loss_grad(yhat, y, weights=None, config=None, primary="mse"):
    if weights is None:
        weights = LossWeights()
    if config is None:
        config = SoftRankConfig()
    fit_g = (mae_fit_loss_grad(yhat, y) if primary == "mae"
             else mse_loss_grad(yhat, y))
    g = fit_g.copy()
    if weights.lambda1 != 0.0:
        g += weights.lambda1 * age_difference_loss_grad(yhat, y)
    if weights.lambda2 != 0.0:
        g += weights.lambda2 * soft_rank_loss_grad(yhat, y, config)
    return g


def hybrid_loss(pred, y, weights=None, config=None, primary="mse"):
    """Tape op over a prediction tensor; returns (scalar Tensor, LossBreakdown).

    Raises NumericsError when any component is non-finite so divergence aborts
    the step instead of silently propagating.
    """
    if not isinstance(pred, Tensor):
        raise TypeError("hybrid_loss expects a Tensor of predictions")
    bd = total_loss(pred.data, y, weights, config, primary)
    if not np.isfinite(bd.total):
        raise NumericsError(
            f"non-finite loss: mse={bd.mse} diff={bd.diff} rank={bd.rank}"
        )
    out = Tensor(np.array(bd.total), dtype=pred.dtype)
    grad = total_loss_grad(pred.data, y, weights, config, primary)

    def bwd(g, needs):
        scale = float(np.asarray(g).reshape(()))
        return ((scale * grad).reshape(pred.shape).astype(pred.dtype),)

    return _record(out, (pred,), bwd), bd
