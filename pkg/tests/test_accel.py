"""Both kernel paths (numba and pure numpy) must agree to float32 accuracy."""

import numpy as np
import pytest

from sfcnext import accel

CONV_CASES = [
    # (x_shape, w_shape, stride, pad, groups)
    ((2, 4, 9, 9, 9), (6, 4, 3, 3, 3), 2, 1, 1),
    ((1, 8, 6, 6, 6), (8, 1, 3, 3, 3), 1, 1, 8),      # depthwise
    ((2, 8, 6, 6, 6), (8, 1, 5, 5, 5), 1, 2, 8),      # depthwise k=5
    ((2, 3, 8, 8, 8), (5, 3, 5, 5, 5), 2, 2, 1),
    ((2, 6, 7, 7, 7), (4, 3, 3, 3, 3), 1, 0, 2),      # grouped, no pad
    ((1, 1, 16, 16, 16), (8, 1, 3, 3, 3), 2, 1, 1),   # stem-like
]


@pytest.mark.parametrize("xs,ws,stride,pad,groups", CONV_CASES)
def test_conv3d_paths_agree(xs, ws, stride, pad, groups, rng):
    x = rng.standard_normal(xs).astype(np.float32)
    w = rng.standard_normal(ws).astype(np.float32)
    y_nb = accel._conv3d_fwd_numba(x, w, stride, pad, groups)
    y_np = accel._conv3d_fwd_np(x, w, stride, pad, groups)
    assert y_nb.shape == y_np.shape
    np.testing.assert_allclose(y_nb, y_np, rtol=1e-4, atol=1e-5)

    dy = rng.standard_normal(y_nb.shape).astype(np.float32)
    gi_nb = np.asarray(accel._conv3d_bwd_input_numba(dy, w, xs, stride, pad, groups))
    gi_np = np.asarray(accel._conv3d_bwd_input_np(dy, w, xs, stride, pad, groups))
    np.testing.assert_allclose(gi_nb, gi_np, rtol=1e-4, atol=1e-5)

    gw_nb = np.asarray(accel._conv3d_bwd_weight_numba(dy, x, ws[2], stride, pad, groups))
    gw_np = np.asarray(accel._conv3d_bwd_weight_np(dy, x, ws[2], stride, pad, groups))
    np.testing.assert_allclose(gw_nb, gw_np, rtol=1e-4, atol=1e-4)


def test_pav_paths_agree(rng):
    for _ in range(50):
        n = int(rng.integers(1, 200))
        y = rng.standard_normal(n)
        out_nb, starts_nb, sizes_nb = accel._pav_noninc_loops(y)
        out_py, starts_py, sizes_py = accel._pav_noninc_py(y)
        np.testing.assert_allclose(out_nb, out_py, atol=1e-12)
        np.testing.assert_array_equal(starts_nb, starts_py)
        np.testing.assert_array_equal(sizes_nb, sizes_py)


def test_pav_is_noningcreasing_and_block_structured(rng):
    y = rng.standard_normal(300)
    out, starts, sizes = accel.pav_noninc(y)
    assert np.all(np.diff(out) <= 1e-12)
    assert starts[0] == 0
    assert sizes.sum() == y.size
    np.testing.assert_array_equal(starts[1:], np.cumsum(sizes)[:-1])
    # each block carries the mean of its inputs
    for s, z in zip(starts, sizes):
        assert abs(out[s] - y[s : s + z].mean()) < 1e-12


def test_pairwise_rank_paths_agree(rng):
    theta = rng.standard_normal(257)
    r_nb = accel._pairwise_rank_loops(theta, 0.1)
    r_np = accel._pairwise_rank_np(theta, 0.1)
    assert np.abs(r_nb - r_np).max() < 1e-5


def test_conv3d_output_size():
    assert accel._out_size(24, 3, 2, 1) == 12
    assert accel._out_size(12, 3, 2, 1) == 6
    assert accel._out_size(3, 3, 2, 1) == 2
