import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from normfill.evaluation import (EmptyEvaluationError, compute_metrics, evaluate_method, gt_method, nearest_method,
                                 render_depth, sparsity_sweep)
from normfill.geometry import DepthMap, default_camera
from normfill.synthdata import build_scene, raycast_sample

from oracles import loop_metrics

K = default_camera()


def dm(values, valid=None):
    values = np.asarray(values, dtype=float)
    return DepthMap(values, np.ones(values.shape, bool) if valid is None else valid)


@pytest.fixture(scope="module")
def samples():
    return [raycast_sample(build_scene(s, "hard"), K, name=f"s{s}") for s in range(3)]


def test_identical_maps_score_perfectly():
    g = dm(np.random.default_rng(0).uniform(1, 80, (8, 8)))
    r = compute_metrics(g, g)
    assert r.rmse_mm == r.mae_mm == r.irmse_per_km == r.imae_per_km == r.rel == 0
    assert r.delta1 == r.delta2 == r.delta3 == 100 and r.n_pixels == 64


def test_hand_computed_constant_error():
    r = compute_metrics(dm(np.full((4, 4), 2.0)), dm(np.full((4, 4), 4.0)))
    assert r.rmse_mm == pytest.approx(2000) and r.mae_mm == pytest.approx(2000)
    assert r.irmse_per_km == pytest.approx(250) and r.imae_per_km == pytest.approx(250)
    assert r.rel == pytest.approx(0.5)
    assert r.delta1 == r.delta2 == r.delta3 == 0  # a ratio of 2 exceeds 1.25 ** 3
    r = compute_metrics(dm(np.full((4, 4), 3.0)), dm(np.full((4, 4), 2.0)))
    assert (r.delta1, r.delta2, r.delta3) == (0, 100, 100)  # 1.5 sits between 1.25 ** 1 and 1.25 ** 2

def test_matches_scalar_oracle_on_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p, g = rng.uniform(0.5, 80, (2, 8, 8))
        vp, vg = rng.random((2, 8, 8)) < 0.8
        vp[0, 0] = vg[0, 0] = True
        r = compute_metrics(dm(p, vp), dm(g, vg))
        np.testing.assert_allclose(r.row()[:8], loop_metrics(p, g, vp & vg), rtol=1e-9, atol=1e-9)
        assert r.n_pixels == int((vp & vg).sum())


@given(arrays(np.float64, (5, 6), elements=st.floats(0.5, 80)), arrays(np.float64, (5, 6), elements=st.floats(0.5, 80)),
       st.floats(0.1, 10))
@settings(max_examples=60, deadline=None)
def test_scaling_and_symmetry(p, g, c):
    a, b = compute_metrics(dm(p), dm(g)), compute_metrics(dm(c * p), dm(c * g))
    assert b.rmse_mm == pytest.approx(c * a.rmse_mm, rel=1e-9, abs=1e-9)
    assert b.mae_mm == pytest.approx(c * a.mae_mm, rel=1e-9, abs=1e-9)
    assert b.irmse_per_km == pytest.approx(a.irmse_per_km / c, rel=1e-9, abs=1e-9)
    assert b.rel == pytest.approx(a.rel, rel=1e-9, abs=1e-12)
    assert (b.delta1, b.delta2, b.delta3) == pytest.approx((a.delta1, a.delta2, a.delta3), abs=100 / 30 + 1e-9)
    s = compute_metrics(dm(g), dm(p))
    assert s.rmse_mm == pytest.approx(a.rmse_mm, rel=1e-12) and s.mae_mm == pytest.approx(a.mae_mm, rel=1e-12)
    assert s.irmse_per_km == pytest.approx(a.irmse_per_km, rel=1e-12)
    assert a.delta1 <= a.delta2 <= a.delta3 <= 100
    assert a.mae_mm <= a.rmse_mm + 1e-9


def test_empty_domain_is_an_error():
    v = np.zeros((3, 3), bool)
    v[0, 0] = True
    with pytest.raises(EmptyEvaluationError):
        compute_metrics(dm(np.ones((3, 3)), v), dm(np.ones((3, 3)), ~v))
    with pytest.raises(ValueError, match="shape"):
        compute_metrics(dm(np.ones((3, 3))), dm(np.ones((3, 4))))


def test_pooled_aggregate_weights_pixels_not_samples(samples, tmp_path):
    report, rows = evaluate_method(nearest_method, samples, tmp_path / "per_sample.csv")
    assert [r[0] for r in rows] == ["s0", "s1", "s2"]
    preds = [nearest_method(s) for s in samples]
    p = np.concatenate([x.values[s.dense_gt.valid] for x, s in zip(preds, samples)])
    g = np.concatenate([s.dense_gt.values[s.dense_gt.valid] for s in samples])
    assert report.rmse_mm == pytest.approx(1000 * np.sqrt(np.mean((p - g) ** 2)), rel=1e-12)
    assert report.n_pixels == sum(r[-1] for r in rows)
    assert (tmp_path / "per_sample.csv").read_text().splitlines()[0].startswith("sample_id,rmse_mm")


def test_gt_method_scores_zero(samples):
    report, _ = evaluate_method(gt_method, samples)
    assert report.rmse_mm == 0 and report.delta1 == 100


def test_sweep_at_full_density_equals_plain_evaluation(samples, tmp_path):
    table = sparsity_sweep(nearest_method, samples, (1.0, 1 / 4), seed=0, csv_path=tmp_path / "sweep.csv")
    plain, _ = evaluate_method(nearest_method, samples)
    assert table[0][2] == plain
    assert table[1][1] < table[0][1]
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 3


def test_reference_density_arithmetic():
    # a 4.3 % LiDAR frame thinned by 4, 16, 64 and 256
    for ratio, pct in [(4, 1.075), (16, 0.269), (64, 0.0672), (256, 0.0168)]:
        assert 4.3 / ratio == pytest.approx(pct, abs=5e-4)


def test_render_depth():
    const = render_depth(dm(np.full((4, 5), 30.0)))
    assert const.dtype == np.uint8 and const.shape == (4, 5, 3)
    assert (const == const[0, 0]).all()
    ramp = render_depth(dm(np.linspace(1, 100, 50)[None, :]), (5, 80))
    np.testing.assert_array_equal(ramp[0, 0], render_depth(dm([[5.0]]), (5, 80))[0, 0])
    np.testing.assert_array_equal(ramp[0, -1], render_depth(dm([[80.0]]), (5, 80))[0, 0])
    from normfill.evaluation import colormap_index

    idx = colormap_index(dm(np.linspace(0.1, 80, 50)[None, :]), (0, 80))
    assert np.all(np.diff(idx.astype(int)) >= 0)
    valid = np.ones((2, 2), bool)
    valid[1, 1] = False
    img = render_depth(dm(np.full((2, 2), 10.0), valid))
    assert (img[1, 1] == 0).all() and img[0, 0].any()
    with pytest.raises(ValueError):
        render_depth(dm([[1.0]]), (5, 5))


def test_sweep_skips_samples_left_without_returns(samples):
    from dataclasses import replace

    s = samples[0]
    none = np.zeros(s.sparse.shape, bool)
    empty = replace(s, sparse=DepthMap(np.zeros(s.sparse.shape), none), mixed_gt=none)
    table = sparsity_sweep(nearest_method, [empty, samples[1]], (1.0,))
    assert table[0][2] == evaluate_method(nearest_method, [samples[1]])[0]
    assert table[0][1] == pytest.approx(100 * samples[1].sparse.density() / 2)
    with pytest.raises(EmptyEvaluationError):
        sparsity_sweep(nearest_method, [empty], (1.0,))
