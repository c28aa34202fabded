"""Soft-rank operator: frozen oracles, invariants, certificate, baselines."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfcnext.softrank import (SoftRankConfig, hard_rank, isotonic_regression,
                              pairwise_rank_approx, permutahedron_vertices,
                              project_permutahedron, soft_rank, soft_rank_vjp,
                              vertex_certificate)

finite_floats = st.floats(min_value=-100, max_value=100,
                          allow_nan=False, allow_infinity=False)


# -- frozen oracle values ----------------------------------------------------

def test_hard_rank_descending_with_stable_ties():
    np.testing.assert_array_equal(hard_rank([3.0, 1.0, 2.0]), [1, 3, 2])
    # ties broken by smaller index
    np.testing.assert_array_equal(hard_rank([5.0, 5.0, 1.0]), [1, 2, 3])


def test_isotonic_regression_pools_violators():
    out, _, _ = isotonic_regression([4.0, 5.0])
    np.testing.assert_allclose(out, [4.5, 4.5])
    out, starts, sizes = isotonic_regression([2.0, 1.0, 3.0])
    np.testing.assert_allclose(out, [2.0, 2.0, 2.0])
    # only strict violators are pooled: [2] stays apart from the merged [1,3]
    np.testing.assert_array_equal(starts, [0, 1])
    np.testing.assert_array_equal(sizes, [1, 2])


def test_projection_segment_example():
    mu, _, _, _ = project_permutahedron(np.array([-0.25, -0.5]),
                                        anchor=np.array([1.0, 2.0]))
    np.testing.assert_allclose(mu, [1.625, 1.375])


def test_soft_rank_two_point_example():
    res = soft_rank(np.array([1.0, 2.0]), SoftRankConfig(epsilon=4.0))
    np.testing.assert_allclose(res.ranks, [1.625, 1.375])


def test_soft_rank_vjp_matches_finite_differences_on_pooled_pair():
    # theta=[1,2] at eps=4 pools both entries into one block; the projection
    # Jacobian there is identity-minus-mean, so upstream e1 maps to
    # (-1/eps)*(0.5, -0.5) (confirmed against central differences below)
    eps = 4.0
    theta = np.array([1.0, 2.0])
    res = soft_rank(theta, SoftRankConfig(epsilon=eps))
    g = soft_rank_vjp(res, np.array([1.0, 0.0]), eps)
    np.testing.assert_allclose(g, [-0.125, 0.125])
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (soft_rank(theta + e, SoftRankConfig(epsilon=eps)).ranks[0]
              - soft_rank(theta - e, SoftRankConfig(epsilon=eps)).ranks[0]) / (2 * h)
        assert abs(fd - g[i]) < 1e-6


def test_pairwise_rank_tied_pair():
    np.testing.assert_allclose(pairwise_rank_approx(np.zeros(2), 0.7), [1.5, 1.5])


# -- invariants --------------------------------------------------------------

@given(st.lists(finite_floats, min_size=1, max_size=32),
       st.floats(min_value=0.05, max_value=20.0))
@settings(max_examples=200, deadline=None)
def test_soft_rank_sum_conservation(values, eps):
    theta = np.array(values)
    r = soft_rank(theta, SoftRankConfig(epsilon=eps)).ranks
    n = theta.size
    assert abs(r.sum() - n * (n + 1) / 2) < 1e-8 * max(1, n)
    assert r.min() >= 1 - 1e-9 and r.max() <= n + 1e-9


@given(st.lists(finite_floats, min_size=2, max_size=32),
       st.floats(min_value=0.05, max_value=20.0))
@settings(max_examples=200, deadline=None)
def test_soft_rank_order_preservation(values, eps):
    theta = np.array(values)
    r = soft_rank(theta, SoftRankConfig(epsilon=eps)).ranks
    for i in range(theta.size):
        for j in range(theta.size):
            if theta[i] > theta[j]:
                assert r[i] <= r[j] + 1e-9


@given(st.lists(finite_floats, min_size=2, max_size=16), st.randoms())
@settings(max_examples=100, deadline=None)
def test_soft_rank_permutation_equivariance(values, pyrand):
    theta = np.array(values)
    perm = np.arange(theta.size)
    pyrand.shuffle(perm)
    r = soft_rank(theta, SoftRankConfig(epsilon=1.3)).ranks
    rp = soft_rank(theta[perm], SoftRankConfig(epsilon=1.3)).ranks
    # equivariance holds exactly when entries are distinct; with ties the
    # stable tie-break still keeps the multiset of ranks intact
    if np.unique(theta).size == theta.size:
        np.testing.assert_allclose(rp, r[perm], atol=1e-9)
    else:
        np.testing.assert_allclose(np.sort(rp), np.sort(r), atol=1e-9)


@given(st.lists(finite_floats, min_size=1, max_size=32),
       st.floats(min_value=-50, max_value=50))
@settings(max_examples=100, deadline=None)
def test_soft_rank_shift_invariance(values, shift):
    theta = np.array(values)
    cfg = SoftRankConfig(epsilon=0.8)
    np.testing.assert_allclose(soft_rank(theta + shift, cfg).ranks,
                               soft_rank(theta, cfg).ranks, atol=1e-8)


def test_soft_rank_epsilon_limit(rng):
    for _ in range(50):
        n = int(rng.integers(2, 64))
        theta = rng.standard_normal(n) * 10
        gap = np.diff(np.sort(theta)).min()
        if gap <= 0:
            continue
        r = soft_rank(theta, SoftRankConfig(epsilon=gap / 100)).ranks
        np.testing.assert_allclose(r, hard_rank(theta), atol=1e-4)


def test_soft_rank_large_epsilon_flattens():
    r = soft_rank(np.array([3.0, 1.0, 2.0]), SoftRankConfig(epsilon=1e9)).ranks
    np.testing.assert_allclose(r, [2.0, 2.0, 2.0], atol=1e-6)


def test_vertex_certificate_on_random_projections(rng):
    for n in range(2, 7):
        verts = permutahedron_vertices(n)
        assert verts.shape == (math.factorial(n), n)
        for _ in range(50):
            z = rng.standard_normal(n) * rng.uniform(0.2, 5.0)
            mu, _, _, _ = project_permutahedron(z)
            assert vertex_certificate(z, mu, verts) <= 1e-6


def test_pairwise_matches_hard_rank_at_low_temperature(rng):
    theta = rng.standard_normal(40) * 5
    r = pairwise_rank_approx(theta, 1e-4)
    np.testing.assert_allclose(r, hard_rank(theta), atol=1e-3)


def test_vjp_orthogonal_to_ones(rng):
    # ranks always sum to n(n+1)/2, so the gradient has zero mean
    for _ in range(20):
        n = int(rng.integers(2, 30))
        res = soft_rank(rng.standard_normal(n), SoftRankConfig(epsilon=0.7))
        g = soft_rank_vjp(res, rng.standard_normal(n), 0.7)
        assert abs(g.sum()) < 1e-9


# -- validation --------------------------------------------------------------

def test_config_rejects_bad_epsilon():
    for eps in (0.0, -1.0, np.inf):
        with pytest.raises(ValueError):
            SoftRankConfig(epsilon=eps)


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        soft_rank(np.array([]))
    with pytest.raises(ValueError):
        hard_rank([])
    with pytest.raises(ValueError):
        pairwise_rank_approx(np.array([1.0]), 0.0)


def test_vjp_rejects_length_mismatch():
    res = soft_rank(np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        soft_rank_vjp(res, np.zeros(2), 1.0)


def test_anchor_length_mismatch():
    with pytest.raises(ValueError):
        project_permutahedron(np.zeros(3), anchor=np.zeros(2))
