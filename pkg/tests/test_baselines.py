import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from normfill.baselines import BilateralParams, EmptySparseError, bilateral_fill, nearest_fill
from normfill.geometry import DepthMap


def brute_nearest(values, valid):
    """Exhaustive scan; ties resolved by (row, col) order of the source."""
    h, w = valid.shape
    out = np.empty((h, w))
    src = [(r, c) for r in range(h) for c in range(w) if valid[r, c]]
    for r in range(h):
        for c in range(w):
            best = min(src, key=lambda p: ((p[0] - r) ** 2 + (p[1] - c) ** 2, p[0], p[1]))
            out[r, c] = values[best]
    return out


def test_nearest_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(40):
        valid = rng.random((8, 8)) < rng.uniform(0.05, 0.5)
        if not valid.any():
            valid[rng.integers(8), rng.integers(8)] = True
        values = np.where(valid, rng.uniform(1, 50, (8, 8)), 0.0)
        got = nearest_fill(DepthMap(values, valid))
        np.testing.assert_array_equal(got.values, brute_nearest(values, valid))
        assert got.valid.all()


def test_nearest_tie_break_prefers_upper_then_left():
    valid = np.zeros((3, 3), dtype=bool)
    valid[0, 1] = valid[2, 1] = valid[1, 0] = valid[1, 2] = True
    values = np.zeros((3, 3))
    values[0, 1], values[2, 1], values[1, 0], values[1, 2] = 1, 2, 3, 4
    assert nearest_fill(DepthMap(values, valid)).values[1, 1] == 1.0


def test_nearest_many_way_ties_on_a_ring():
    # 12 lattice points at squared distance 25 from the center, more than one query batch
    h = w = 11
    valid = np.zeros((h, w), dtype=bool)
    for dr, dc in [(-5, 0), (5, 0), (0, -5), (0, 5), (-3, -4), (-3, 4), (3, -4), (3, 4), (-4, -3), (-4, 3),
                   (4, -3), (4, 3)]:
        valid[5 + dr, 5 + dc] = True
    for r, c in [(0, 0), (0, 10), (10, 0), (10, 10)]:
        valid[r, c] = True
    values = np.where(valid, np.arange(h * w).reshape(h, w) + 1.0, 0.0)
    np.testing.assert_array_equal(nearest_fill(DepthMap(values, valid)).values, brute_nearest(values, valid))


def test_single_pixel_gives_constant_map():
    valid = np.zeros((5, 7), dtype=bool)
    valid[2, 3] = True
    out = nearest_fill(DepthMap(np.where(valid, 9.0, 0.0), valid))
    assert np.all(out.values == 9.0)
    out = bilateral_fill(DepthMap(np.where(valid, 9.0, 0.0), valid), np.random.default_rng(0).random((5, 7, 3)))
    assert np.allclose(out.values, 9.0)


def test_dense_input_is_identity():
    values = np.random.default_rng(1).uniform(1, 20, (6, 9))
    d = DepthMap(values, np.ones((6, 9), dtype=bool))
    np.testing.assert_array_equal(nearest_fill(d).values, values)
    rgb = np.random.default_rng(2).random((6, 9, 3))
    once = bilateral_fill(d, rgb)
    np.testing.assert_array_equal(once.values, values)
    np.testing.assert_array_equal(bilateral_fill(once, rgb).values, once.values)


def test_empty_sparse_rejected():
    empty = DepthMap(np.zeros((4, 4)), np.zeros((4, 4), dtype=bool))
    with pytest.raises(EmptySparseError):
        nearest_fill(empty)
    with pytest.raises(EmptySparseError):
        bilateral_fill(empty, np.zeros((4, 4, 3)))


def test_single_hole_on_plane_stays_in_neighbour_range():
    r, c = np.mgrid[0:15, 0:15]
    values = 10.0 + 0.1 * r + 0.05 * c
    valid = np.ones((15, 15), dtype=bool)
    valid[7, 7] = False
    out = bilateral_fill(DepthMap(values, valid), np.full((15, 15, 3), 0.5))
    win = values[0:15, 0:15][valid]
    assert win.min() <= out.values[7, 7] <= win.max()
    assert out.values[7, 7] == pytest.approx(values[7, 7], abs=1e-9)  # symmetric weights on a plane


def test_edge_preservation_with_aligned_color_step():
    h, w = 20, 30
    rgb = np.zeros((h, w, 3))
    rgb[:, 15:] = 0.8
    depth = np.where(np.arange(w)[None, :] < 15, 5.0, 25.0) * np.ones((h, 1))
    valid = np.zeros((h, w), dtype=bool)
    valid[::4, ::5] = True
    out = bilateral_fill(DepthMap(np.where(valid, depth, 0.0), valid), rgb)
    left, right = out.values[:, :15], out.values[:, 15:]
    assert np.all(np.abs(left - 5.0) <= 0.05 * 5.0)
    assert np.all(np.abs(right - 25.0) <= 0.05 * 25.0)


def test_bilateral_falls_back_when_iterations_run_out():
    valid = np.zeros((10, 40), dtype=bool)
    valid[5, 0] = True
    out = bilateral_fill(DepthMap(np.where(valid, 3.0, 0.0), valid), np.zeros((10, 40, 3)),
                         BilateralParams(radius=1, max_iterations=2))
    assert out.valid.all() and np.allclose(out.values, 3.0)


def test_params_validation():
    with pytest.raises(ValueError):
        BilateralParams(sigma_spatial=0)
    with pytest.raises(ValueError):
        BilateralParams(radius=0)


@given(arrays(np.float64, (7, 9), elements=st.floats(0.5, 80)), arrays(bool, (7, 9)),
       arrays(np.float64, (7, 9, 3), elements=st.floats(0, 1)))
@settings(max_examples=40, deadline=None)
def test_outputs_interpolate_never_extrapolate(values, valid, rgb):
    if not valid.any():
        valid[0, 0] = True
    d = DepthMap(np.where(valid, values, 0.0), valid)
    lo, hi = values[valid].min(), values[valid].max()
    for out in (nearest_fill(d), bilateral_fill(d, rgb)):
        assert out.valid.all()
        assert np.all(out.values >= lo - 1e-9 * hi) and np.all(out.values <= hi + 1e-9 * hi)
