"""Fast differentiable ranking via Euclidean projection onto the permutahedron.

Descending convention throughout: the largest score receives rank 1. The
regularized soft rank of a score vector theta is the Euclidean projection of
-theta/epsilon onto the permutahedron of (1, ..., n), computed in O(n log n)
by sorting plus non-increasing isotonic regression (pool-adjacent-violators).
The pooled block structure of the isotonic solution makes the backward pass
exact: within each block the Jacobian acts as identity minus the block mean.
"""

from dataclasses import dataclass

import numpy as np

from . import accel


@dataclass
class SoftRankConfig:
    """Quadratic-regularization soft-rank settings."""

    epsilon: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.epsilon < np.inf):
            raise ValueError(f"epsilon must be in (0, inf), got {self.epsilon}")


@dataclass
class SoftRankResult:
    ranks: np.ndarray          # soft ranks, length n
    permutation: np.ndarray    # argsort of -theta (descending order), length n
    block_starts: np.ndarray   # pooled blocks in sorted order
    block_sizes: np.ndarray

    @property
    def n(self):
        return self.ranks.shape[0]


def _stable_desc_argsort(v):
    """Descending argsort with ties broken by smaller index.

    Uses the (unstable but faster-scaling) default sort, then re-sorts the
    index runs of tied values; with few ties the fix-up is O(n).
    """
    perm = np.argsort(-v)
    s = v[perm]
    if (s[1:] == s[:-1]).any():
        _fix_tie_runs(s, perm)
    return perm


def _fix_tie_runs(s, perm):
    """Sort the indices inside each equal-value run of s (perm is mutated)."""
    n = s.size
    i = 0
    while i < n - 1:
        if s[i + 1] == s[i]:
            j = i + 1
            while j < n and s[j] == s[i]:
                j += 1
            perm[i:j] = np.sort(perm[i:j])
            i = j
        else:
            i += 1


def hard_rank(values):
    """Integer ranks, largest value -> 1; ties broken by smaller index."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("hard_rank: empty input")
    order = _stable_desc_argsort(v)
    ranks = np.empty(v.size, dtype=np.int64)
    ranks[order] = np.arange(1, v.size + 1)
    return ranks


def isotonic_regression(y):
    """Least-squares non-increasing fit of y.

    Returns (solution, block_starts, block_sizes); blocks are the maximal
    pooled runs sharing one fitted value.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("isotonic_regression: empty input")
    return accel.pav_noninc(y)


def project_permutahedron(z, anchor=None):
    """Euclidean projection of z onto the convex hull of permutations of anchor.

    Returns (mu, permutation, block_starts, block_sizes) where the blocks live
    in the sorted (descending-z) order.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    n = z.size
    if anchor is not None:
        anchor = np.asarray(anchor, dtype=np.float64).reshape(-1)
        if anchor.size != n:
            raise ValueError(
                f"project_permutahedron: len(z)={n} != len(anchor)={anchor.size}"
            )
    perm = np.argsort(-z)
    s = z[perm]
    if (s[1:] == s[:-1]).any():
        _fix_tie_runs(s, perm)
    if anchor is None:
        # default anchor 1..n: fused subtract/PAV/re-add kernel
        mu_sorted, starts, sizes = accel.rank_project(s)
    else:
        w = np.sort(anchor)[::-1]
        v, starts, sizes = accel.pav_noninc(s - w)
        mu_sorted = s - v
    mu = np.empty(n, dtype=np.float64)
    mu[perm] = mu_sorted
    return mu, perm, starts, sizes


def soft_rank(theta, config=None):
    """Regularized soft ranks: projection of -theta/epsilon onto P((1..n))."""
    if config is None:
        config = SoftRankConfig()
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    n = theta.size
    if n == 0:
        raise ValueError("soft_rank: empty input")
    # ascending theta is exactly descending z for z = -theta/eps, so the
    # negation and division passes fold into the projection kernel
    perm = np.argsort(theta)
    s = theta[perm]
    if (s[1:] == s[:-1]).any():
        _fix_tie_runs(s, perm)
    mu_sorted, starts, sizes = accel.rank_project_scaled(s, 1.0 / config.epsilon)
    mu = np.empty(n, dtype=np.float64)
    mu[perm] = mu_sorted
    return SoftRankResult(ranks=mu, permutation=perm,
                          block_starts=starts, block_sizes=sizes)


def soft_rank_vjp(result, upstream, epsilon):
    """Gradient of <upstream, soft_rank(theta)> with respect to theta.

    The projection Jacobian is blockwise identity-minus-mean in the sorted
    coordinates; composing with z = -theta/epsilon gives the -1/epsilon factor.
    At exact block boundaries this is the chosen subgradient.
    """
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    n = result.n
    if upstream.size != n:
        raise ValueError(f"soft_rank_vjp: upstream length {upstream.size} != {n}")
    us = upstream[result.permutation]
    gs = np.empty(n, dtype=np.float64)
    for start, size in zip(result.block_starts, result.block_sizes):
        blk = us[start : start + size]
        gs[start : start + size] = blk - blk.mean()
    g = np.empty(n, dtype=np.float64)
    g[result.permutation] = gs
    return -g / epsilon


def pairwise_rank_approx(theta, temperature):
    """O(n^2) sigmoid rank estimate: r_i = 1 + sum_{j!=i} logistic((theta_j - theta_i)/tau)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.size == 0:
        raise ValueError("pairwise_rank_approx: empty input")
    return accel.pairwise_rank(theta, float(temperature))


def permutahedron_vertices(n):
    """All n! vertices of P((1..n)); only sensible for small n."""
    from itertools import permutations

    return np.array(list(permutations(range(1, n + 1))), dtype=np.float64)


def vertex_certificate(z, mu, vertices=None):
    """Max over vertices v of <z - mu, v - mu>; <= 0 (up to tol) iff mu is the projection."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if vertices is None:
        vertices = permutahedron_vertices(z.size)
    diff = z - mu
    return float(((vertices - mu) @ diff).max())
