"""Evaluation metrics: MAE, Pearson correlation, Spearman rank correlation."""

from dataclasses import dataclass

import numpy as np

from .softrank import hard_rank
from .tensor import ShapeError


class UndefinedCorrelationError(ValueError):
    """Correlation of a zero-variance vector is undefined."""


@dataclass
class MetricsReport:
    mae: float
    pcc: float
    srcc: float
    n: int


def _pair(yhat, y, name, min_n=1):
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if yhat.size != y.size:
        raise ShapeError(f"{name}: length mismatch {yhat.size} vs {y.size}")
    if yhat.size < min_n:
        raise ShapeError(f"{name}: need at least {min_n} samples, got {yhat.size}")
    return yhat, y


def mae(yhat, y):
    yhat, y = _pair(yhat, y, "mae")
    return float(np.abs(yhat - y).mean())


def pcc(yhat, y):
    yhat, y = _pair(yhat, y, "pcc", min_n=2)
    a = yhat - yhat.mean()
    b = y - y.mean()
    va = (a * a).sum()
    vb = (b * b).sum()
    if va == 0.0 or vb == 0.0:
        raise UndefinedCorrelationError("pcc: zero variance input")
    return float((a * b).sum() / np.sqrt(va * vb))


def srcc(yhat, y):
    """Pearson correlation of the hard-rank vectors."""
    yhat, y = _pair(yhat, y, "srcc", min_n=2)
    return pcc(hard_rank(yhat), hard_rank(y))


def srcc_closed_form(yhat, y):
    """1 - 6 sum d^2 / (n (n^2 - 1)); valid oracle on tie-free data."""
    yhat, y = _pair(yhat, y, "srcc", min_n=2)
    d = (hard_rank(yhat) - hard_rank(y)).astype(np.float64)
    n = yhat.size
    return float(1.0 - 6.0 * (d * d).sum() / (n * (n * n - 1)))


def evaluate(yhat, y):
    return MetricsReport(mae=mae(yhat, y), pcc=pcc(yhat, y), srcc=srcc(yhat, y),
                         n=int(np.asarray(y).size))
