import json

import numpy as np
import pytest

from normfill.geometry import (TAU_MIX, RigidTransform, angular_error_deg, default_camera, fit_plane_normals,
                               rasterize_zbuffer, unproject_depth)
from normfill.synthdata import (Box, Cylinder, Dataset, LidarPattern, SampleIOError, Scene, build_scene,
                                camera_visible_points, collate, generate_dataset, raycast_sample, read_sample,
                                scan_lidar, split_counts, subsample_sparse, write_sample)

K = default_camera()


@pytest.fixture(scope="module")
def samples():
    return [raycast_sample(build_scene(s, "hard"), K) for s in range(6)]


def test_build_scene_is_deterministic_and_seed_dependent():
    a, b, c = build_scene(11, "hard"), build_scene(11, "hard"), build_scene(12, "hard")
    assert a == b
    assert a != c


@pytest.mark.parametrize("difficulty,lo,hi", [("easy", 3, 5), ("hard", 10, 20)])
def test_primitive_counts(difficulty, lo, hi):
    counts = [build_scene(s, difficulty).n_primitives for s in range(30)]
    assert lo <= min(counts) and max(counts) <= hi


def test_scene_requires_a_primitive():
    with pytest.raises(ValueError):
        Scene().validate()
    with pytest.raises(ValueError):
        build_scene(0, "medium")


def test_ground_only_view_matches_closed_form():
    # the only primitive sits behind the camera, so every hit is the ground
    scene = Scene(cylinders=[Cylinder((0.0, -50.0), 0.5, 2.0, (0.5, 0.5, 0.5))])
    s = raycast_sample(scene, K)
    rows = np.arange(K.height)
    below = rows > K.cy
    expected = 1.5 * K.fy / (rows[below] - K.cy)
    depth = s.dense_gt.values[below]
    ok = expected <= 80
    np.testing.assert_allclose(depth[ok], np.broadcast_to(expected[ok, None], depth[ok].shape), atol=1e-6)
    assert np.all(s.normals_gt.vectors[s.normals_gt.valid] == np.array([0.0, -1.0, 0.0]))
    assert not s.dense_gt.valid[: int(K.cy) + 1].any()


def test_rgb_is_lambertian_with_ambient():
    scene = Scene(cylinders=[Cylinder((0.0, -50.0), 0.5, 2.0, (0.5, 0.5, 0.5))], ground_albedo=(0.4, 0.6, 0.8))
    s = raycast_sample(scene, K)
    shade = max(0.0, float(np.dot([0, -1, 0], scene.sun)))
    np.testing.assert_allclose(s.rgb[-1, 0], np.clip(np.array([0.4, 0.6, 0.8]) * shade + 0.2, 0, 1))


def test_box_edge_produces_mixing():
    scene = Scene(boxes=[Box((0.0, 1.5, 8.0), (2.0, 2.5, 1.0), 0.0, (0.7, 0.2, 0.2))])
    s = raycast_sample(scene, K)
    assert s.mixed_gt.sum() > 0
    cols = np.flatnonzero(s.mixed_gt.any(axis=0))
    # the box spans columns cx +- fx * 1 / 7.5; mixing hugs one vertical edge
    left, right = K.cx - K.fx / 7.5, K.cx + K.fx / 7.5
    assert np.all((np.abs(cols - left) < 4) | (np.abs(cols - right) < 4))


def test_no_mixing_without_offset():
    scene = Scene(boxes=[Box((0.0, 1.5, 8.0), (2.0, 2.5, 1.0), 0.0, (0.7, 0.2, 0.2))])
    s = raycast_sample(scene, K, LidarPattern(to_camera=RigidTransform()))
    assert s.mixed_gt.sum() == 0


def test_sparse_density_in_expected_band(samples):
    for s in samples:
        assert 0.02 <= s.sparse.density() <= 0.08


def test_sample_invariants(samples):
    for s in samples:
        assert np.array_equal(s.binary_mask, s.sparse.valid)
        n = s.normals_gt
        assert np.abs(np.linalg.norm(n.vectors[n.valid], axis=-1) - 1).max() < 1e-5
        pts = unproject_depth(s.dense_gt.values, K)
        assert np.all(np.sum(n.vectors * pts, axis=-1)[n.valid] < 0)
        assert np.all((s.rgb >= 0) & (s.rgb <= 1))


def test_plane_fit_agrees_with_analytic_normals(samples):
    for s in samples:
        fit = fit_plane_normals(s.dense_gt, K)
        inner = np.zeros(fit.valid.shape, dtype=bool)
        inner[2:-2, 2:-2] = True
        m = inner & fit.valid & s.normals_gt.valid
        assert np.median(angular_error_deg(fit.vectors[m], s.normals_gt.vectors[m])) < 1.0


def test_mixed_mask_matches_zbuffer_oracle():
    lidar = LidarPattern()
    for seed in range(4):
        scene = build_scene(seed, "hard")
        s = raycast_sample(scene, K, lidar)
        pts_cam = lidar.to_camera.apply(scan_lidar(scene, lidar))
        oracle = rasterize_zbuffer(camera_visible_points(scene, pts_cam), K)
        expect = s.sparse.valid & oracle.valid & (s.sparse.values - oracle.values > TAU_MIX)
        assert np.array_equal(s.mixed_gt, expect)


def test_subsample_ratio_one_is_identity(samples):
    assert subsample_sparse(samples[0], 1.0, 3) is samples[0]
    with pytest.raises(ValueError):
        subsample_sparse(samples[0], 0.0, 3)
    with pytest.raises(ValueError):
        subsample_sparse(samples[0], 2.0, 3)


@pytest.mark.parametrize("ratio", [1 / 4, 1 / 16, 1 / 64, 1 / 256])
def test_subsample_counts_are_binomial(samples, ratio):
    s = samples[0]
    n = int(s.sparse.valid.sum())
    counts = np.array([subsample_sparse(s, ratio, seed).sparse.valid.sum() for seed in range(100)])
    sigma = np.sqrt(n * ratio * (1 - ratio))
    # the mean of 100 draws lies within 2 standard errors of n * ratio
    assert abs(counts.mean() - n * ratio) <= 2 * sigma / np.sqrt(100)
    assert np.mean(np.abs(counts - n * ratio) <= 2 * sigma) >= 0.9
    sub = subsample_sparse(s, ratio, 0)
    assert np.array_equal(sub.binary_mask, sub.sparse.valid)
    assert not (sub.sparse.valid & ~s.sparse.valid).any()
    assert not (sub.mixed_gt & ~sub.sparse.valid).any()


def test_kitti_density_arithmetic():
    # 4.3 % of a 1216 x 352 frame, thinned by 256
    assert 0.043 / 256 * 100 == pytest.approx(0.0168, abs=5e-5)
    assert 1216 * 352 * 0.043 / 256 == pytest.approx(72, abs=0.5)


def test_depth_png_encoding(tmp_path, samples):
    import cv2

    from dataclasses import replace

    from normfill.geometry import DepthMap

    s = samples[0]
    values = s.sparse.values.copy()
    r, c = np.argwhere(s.sparse.valid)[0]
    values[r, c] = 10.0
    s = replace(s, sparse=DepthMap(values, s.sparse.valid))
    paths = write_sample(s, tmp_path)
    raw = cv2.imread(str(paths["sparse"]), cv2.IMREAD_UNCHANGED)
    assert raw.dtype == np.uint16
    assert raw[r, c] == 2560
    assert np.all(raw[~s.sparse.valid] == 0)


def test_round_trip(tmp_path, samples):
    s = samples[1]
    write_sample(s, tmp_path)
    back = read_sample(tmp_path)
    for a, b in ((s.sparse, back.sparse), (s.dense_gt, back.dense_gt)):
        assert np.array_equal(a.valid, b.valid)
        assert np.abs(a.values - b.values).max() <= 1 / 512
    assert np.array_equal(back.mixed_gt, s.mixed_gt)
    assert np.array_equal(back.normals_gt.valid, s.normals_gt.valid)
    assert angular_error_deg(back.normals_gt.vectors[back.normals_gt.valid],
                             s.normals_gt.vectors[s.normals_gt.valid]).max() < 0.01
    assert np.abs(back.rgb - s.rgb).max() <= 0.5 / 255 + 1e-12


def test_reader_accepts_depth_only_directories(tmp_path, samples):
    write_sample(samples[2], tmp_path)
    (tmp_path / "normals.png").unlink()
    (tmp_path / "mixed.png").unlink()
    back = read_sample(tmp_path)
    assert not back.normals_gt.valid.any() and not back.mixed_gt.any()


def test_reader_errors_name_the_file(tmp_path, samples):
    write_sample(samples[0], tmp_path)
    (tmp_path / "dense.png").unlink()
    with pytest.raises(SampleIOError, match="dense.png"):
        read_sample(tmp_path)
    (tmp_path / "dense.png").write_bytes(b"not a png")
    with pytest.raises(SampleIOError, match="dense.png"):
        read_sample(tmp_path)


def test_generate_dataset(tmp_path):
    manifest = generate_dataset(5, 3, tmp_path / "a", "easy")
    lines = manifest.read_text().splitlines()
    assert len(lines) == 5
    rec = json.loads(lines[0])
    assert {"split", "paths", "seed"} <= set(rec)
    generate_dataset(5, 3, tmp_path / "b", "easy", threads=2)
    for rel in (tmp_path / "a").rglob("*.png"):
        assert rel.read_bytes() == (tmp_path / "b" / rel.relative_to(tmp_path / "a")).read_bytes()
    ds = Dataset.open(tmp_path / "a")
    assert len(ds.split("train")) == 4 and len(ds.split("val")) == 1
    batch = collate(list(ds.samples("train"))[:2])
    assert batch["rgb"].shape == (2, 3, 64, 192) and batch["sparse"].dtype == np.float32


def test_split_is_ten_to_one():
    assert split_counts(220) == (200, 20)
    assert split_counts(11) == (10, 1)
    assert split_counts(1) == (1, 0)
