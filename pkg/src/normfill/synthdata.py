"""Procedural street scenes, ray casting, simulated LiDAR and dataset files."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .geometry import (Z_MAX, CameraIntrinsics, DepthMap, NormalMap, RigidTransform, default_camera,
                       pixel_rays, warp_lidar_to_camera)

CAMERA_HEIGHT = 1.5
AMBIENT = 0.2
SKY_RGB = (0.55, 0.70, 0.90)
LIDAR_MAX_RANGE = 120.0
SUBSAMPLE_RATIOS = (1.0, 1 / 4, 1 / 16, 1 / 64, 1 / 256)
DEPTH_SCALE = 256.0


class SampleIOError(IOError):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = Path(path)


# scene description -----------------------------------------------------------


@dataclass
class Box:
    """Upright box resting on the ground; ``center`` is the bottom-face center."""

    center: Tuple[float, float, float]
    size: Tuple[float, float, float]  # width (x), height (up), length (z)
    yaw: float
    albedo: Tuple[float, float, float]


@dataclass
class Cylinder:
    center: Tuple[float, float]  # (x, z) of the axis
    radius: float
    height: float
    albedo: Tuple[float, float, float]


@dataclass
class Scene:
    ground_height: float = CAMERA_HEIGHT
    ground_albedo: Tuple[float, float, float] = (0.45, 0.45, 0.47)
    boxes: List[Box] = field(default_factory=list)
    cylinders: List[Cylinder] = field(default_factory=list)
    sun: Tuple[float, float, float] = (0.3, -0.8, -0.5)

    def __post_init__(self):
        s = np.asarray(self.sun, dtype=float)
        self.sun = tuple(s / np.linalg.norm(s))

    @property
    def n_primitives(self) -> int:
        return len(self.boxes) + len(self.cylinders)

    def validate(self) -> None:
        if self.n_primitives < 1:
            raise ValueError("scene needs at least one primitive besides the ground")
        for b in self.boxes:
            if abs(b.center[1] - self.ground_height) > 1e-9 or b.size[1] <= 0:
                raise ValueError("boxes must rest on the ground")
        for c in self.cylinders:
            if c.height <= 0 or c.radius <= 0:
                raise ValueError("cylinders need positive radius and height")


@dataclass
class LidarPattern:
    elevations_deg: Tuple[float, ...] = tuple(np.linspace(-12.0, 2.0, 16))
    azimuth_step_deg: float = 2.0
    azimuth_range_deg: Tuple[float, float] = (-46.0, 46.0)
    to_camera: RigidTransform = field(
        default_factory=lambda: RigidTransform.from_translation((0.3, -0.2, 0.0)))

    def __post_init__(self):
        if len(self.elevations_deg) < 4:
            raise ValueError("need at least 4 beams")
        if self.azimuth_step_deg <= 0:
            raise ValueError("azimuth step must be positive")

    def directions(self) -> np.ndarray:
        """Unit ray directions in the LiDAR frame, azimuth-major (firing order)."""
        az = np.radians(np.arange(self.azimuth_range_deg[0], self.azimuth_range_deg[1] + 1e-9,
                                  self.azimuth_step_deg))
        el = np.radians(np.asarray(self.elevations_deg, dtype=float))
        a, e = np.meshgrid(az, el, indexing="ij")
        d = np.stack([np.cos(e) * np.sin(a), -np.sin(e), np.cos(e) * np.cos(a)], axis=-1)
        return d.reshape(-1, 3)


def _rand_albedo(rng, lo=0.2, hi=0.9):
    return tuple(float(c) for c in rng.uniform(lo, hi, size=3))


def build_scene(seed: int, difficulty: str = "easy") -> Scene:
    """Random street: buildings along both sides, cars, poles and trunks."""
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"difficulty must be 'easy' or 'hard', got {difficulty!r}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 6)) if difficulty == "easy" else int(rng.integers(10, 21))
    g = CAMERA_HEIGHT
    scene = Scene(ground_albedo=_rand_albedo(rng, 0.3, 0.55),
                  sun=(rng.uniform(-0.6, 0.6), rng.uniform(-1.0, -0.5), rng.uniform(-0.8, 0.2)))
    kinds = rng.choice(["building", "car", "pole"], size=n, p=[0.4, 0.35, 0.25])
    kinds[0] = "building"
    for kind in kinds:
        side = rng.choice([-1.0, 1.0])
        if kind == "building":
            w, h, l = rng.uniform(4, 10), rng.uniform(4, 14), rng.uniform(6, 20)
            x = side * (rng.uniform(5.0, 9.0) + w / 2)
            z = rng.uniform(8.0, 60.0)
            scene.boxes.append(Box((x, g, z), (w, h, l), float(rng.uniform(-0.15, 0.15)), _rand_albedo(rng)))
        elif kind == "car":
            x = rng.uniform(-4.0, 4.0)
            z = rng.uniform(6.0, 45.0)
            scene.boxes.append(Box((x, g, z), (1.8, rng.uniform(1.3, 1.7), rng.uniform(3.8, 4.8)),
                                   float(rng.uniform(-0.3, 0.3)), _rand_albedo(rng)))
        else:
            x = side * rng.uniform(2.5, 6.0)
            z = rng.uniform(4.0, 40.0)
            scene.cylinders.append(Cylinder((x, z), rng.uniform(0.15, 0.4), rng.uniform(3.0, 8.0),
                                            _rand_albedo(rng)))
    scene.validate()
    return scene


# ray casting -------------------------------------------------------------------


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _hit_ground(o, d, height):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (height - o[:, 1]) / d[:, 1]
    t = np.where((d[:, 1] > 0) & (t > 0), t, np.inf)
    n = np.broadcast_to(np.array([0.0, -1.0, 0.0]), d.shape)
    return t, n


def _hit_box(o, d, box: Box):
    r = _yaw_matrix(box.yaw)
    c = np.asarray(box.center, dtype=float)
    lo_ = o - c
    ol = lo_ @ r  # rotate into the box frame (r is orthonormal)
    dl = d @ r
    w, h, l = box.size
    lo = np.array([-w / 2, -h, -l / 2])
    hi = np.array([w / 2, 0.0, l / 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (lo - ol) * inv
        t2 = (hi - ol) * inv
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = dl == 0
    inside = (ol >= lo) & (ol <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    axis = tmin.argmax(axis=1)
    nl = np.zeros_like(d)
    rows = np.arange(len(d))
    nl[rows, axis] = -np.sign(dl[rows, axis])
    n = nl @ r.T
    return np.where(hit, t_near, np.inf), n


def _hit_cylinder(o, d, cyl: Cylinder, ground: float):
    cx, cz = cyl.center
    y_top = ground - cyl.height
    px, pz = o[:, 0] - cx, o[:, 2] - cz
    a = d[:, 0] ** 2 + d[:, 2] ** 2
    b = 2 * (d[:, 0] * px + d[:, 2] * pz)
    c = px ** 2 + pz ** 2 - cyl.radius ** 2
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
    y = o[:, 1] + t_side * d[:, 1]
    ok = (a > 0) & (disc >= 0) & (t_side > 1e-9) & (y >= y_top) & (y <= ground)
    t_side = np.where(ok, t_side, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        hx = px + t_side * d[:, 0]
        hz = pz + t_side * d[:, 2]
        t_cap = (y_top - o[:, 1]) / d[:, 1]
        cap_x = px + t_cap * d[:, 0]
        cap_z = pz + t_cap * d[:, 2]
    n_side = np.stack([hx, np.zeros_like(hx), hz], axis=1) / cyl.radius
    cap_ok = (d[:, 1] > 0) & (t_cap > 1e-9) & (cap_x ** 2 + cap_z ** 2 <= cyl.radius ** 2)
    t_cap = np.where(cap_ok, t_cap, np.inf)
    use_cap = t_cap < t_side
    n = np.where(use_cap[:, None], np.array([0.0, -1.0, 0.0]), n_side)
    return np.minimum(t_side, t_cap), np.nan_to_num(n)


def cast_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest intersection along ``origin + t * dir``.

    Returns ``t`` (inf on miss), unit normals and albedo per ray."""
    o = np.broadcast_to(np.asarray(origins, dtype=float), dirs.shape)
    best_t, n = _hit_ground(o, dirs, scene.ground_height)
    best_n = np.array(n)
    best_a = np.broadcast_to(np.asarray(scene.ground_albedo), dirs.shape).copy()
    for box in scene.boxes:
        t, n = _hit_box(o, dirs, box)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = n[closer]
        best_a[closer] = box.albedo
    for cyl in scene.cylinders:
        t, n = _hit_cylinder(o, dirs, cyl, scene.ground_height)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = n[closer]
        best_a[closer] = cyl.albedo
    return best_t, best_n, best_a


@dataclass
class Sample:
    rgb: np.ndarray  # H x W x 3 in [0, 1]
    sparse: DepthMap
    dense_gt: DepthMap
    normals_gt: NormalMap
    mixed_gt: np.ndarray
    name: str = ""

    @property
    def binary_mask(self) -> np.ndarray:
        return self.sparse.valid

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """Network-ready channel-first float32 arrays."""
        f = np.float32
        return {
            "rgb": self.rgb.transpose(2, 0, 1).astype(f),
            "sparse": self.sparse.values[None].astype(f),
            "mask": self.sparse.valid[None].astype(f),
            "gt_depth": self.dense_gt.values[None].astype(f),
            "gt_mask": self.dense_gt.valid[None].astype(f),
            "gt_normals": self.normals_gt.vectors.transpose(2, 0, 1).astype(f),
            "gt_normal_mask": self.normals_gt.valid[None].astype(f),
            "mixed": self.mixed_gt[None].astype(f),
        }


def render_camera(scene: Scene, K: CameraIntrinsics, z_max: float = Z_MAX):
    rays = pixel_rays(K).reshape(-1, 3)
    t, n, albedo = cast_rays(scene, np.zeros(3), rays)
    hit = np.isfinite(t)
    sun = np.asarray(scene.sun)
    shade = np.clip(n @ sun, 0.0, None)[:, None]
    rgb = np.where(hit[:, None], albedo * shade + AMBIENT, np.asarray(SKY_RGB))
    rgb = np.clip(rgb, 0.0, 1.0).reshape(K.height, K.width, 3)
    depth = np.where(hit, t, 0.0).reshape(K.height, K.width)
    valid = hit.reshape(K.height, K.width) & (depth <= z_max)
    normals = NormalMap(n.reshape(K.height, K.width, 3), valid)
    return rgb, DepthMap(depth, valid), normals


def scan_lidar(scene: Scene, lidar: LidarPattern) -> np.ndarray:
    """LiDAR-frame return points in firing order."""
    T = lidar.to_camera
    d_lidar = lidar.directions()
    d_cam = d_lidar @ T.rotation.T
    t, _, _ = cast_rays(scene, T.translation, d_cam)
    keep = np.isfinite(t) & (t <= LIDAR_MAX_RANGE)
    return d_lidar[keep] * t[keep, None]


def camera_visible_points(scene: Scene, points_cam: np.ndarray) -> np.ndarray:
    """First camera-ray hit along the line of sight to each point."""
    p = points_cam[points_cam[:, 2] > 0]
    dirs = p / p[:, 2:3]
    t, _, _ = cast_rays(scene, np.zeros(3), dirs)
    return dirs * np.minimum(t, p[:, 2])[:, None]


def raycast_sample(scene: Scene, K: Optional[CameraIntrinsics] = None,
                   lidar: Optional[LidarPattern] = None, seed: int = 0, name: str = "") -> Sample:
    """Render RGB, dense depth and normals, and simulate the sparse LiDAR map.

    The mixed-pixel oracle z-buffers the camera-visible surface points on the
    exact lines of sight of the warped returns.
    """
    K = K or default_camera()
    lidar = lidar or LidarPattern()
    scene.validate()
    rgb, dense, normals = render_camera(scene, K)
    pts_lidar = scan_lidar(scene, lidar)
    visible = camera_visible_points(scene, lidar.to_camera.apply(pts_lidar))
    sparse, mixed = warp_lidar_to_camera(pts_lidar, lidar.to_camera, K, scene_points=visible)
    return Sample(rgb=rgb, sparse=sparse, dense_gt=dense, normals_gt=normals, mixed_gt=mixed, name=name)


def subsample_sparse(sample: Sample, ratio: float, seed: int) -> Sample:
    """Keep each valid sparse pixel independently with probability ``ratio``."""
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    if ratio == 1:
        return sample
    rng = np.random.default_rng(seed)
    keep = sample.sparse.valid & (rng.random(sample.sparse.shape) < ratio)
    return replace(sample, sparse=DepthMap(sample.sparse.values, keep), mixed_gt=sample.mixed_gt & keep)


# files -------------------------------------------------------------------------

FILES = ("rgb.png", "sparse.png", "dense.png", "normals.png", "mixed.png")


def _encode_depth(d: DepthMap) -> np.ndarray:
    q = np.round(d.values * DEPTH_SCALE)
    return np.where(d.valid, np.clip(q, 1, 65535), 0).astype(np.uint16)


def _decode_depth(raw: np.ndarray) -> DepthMap:
    raw = raw.astype(np.float64)
    return DepthMap(raw / DEPTH_SCALE, raw > 0)


def _write_png(path: Path, img: np.ndarray) -> None:
    if img.ndim == 3:
        img = img[..., ::-1]  # OpenCV stores BGR
    if not cv2.imwrite(str(path), np.ascontiguousarray(img)):
        raise SampleIOError(path, "could not write PNG")


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise SampleIOError(path, "missing file")
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise SampleIOError(path, "corrupt or unreadable PNG")
    return img[..., ::-1] if img.ndim == 3 else img


def write_sample(sample: Sample, directory) -> Dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {name.split(".")[0]: d / name for name in FILES}
    _write_png(paths["rgb"], np.round(np.clip(sample.rgb, 0, 1) * 255).astype(np.uint8))
    _write_png(paths["sparse"], _encode_depth(sample.sparse))
    _write_png(paths["dense"], _encode_depth(sample.dense_gt))
    n = sample.normals_gt
    enc = np.round((np.clip(n.vectors, -1, 1) + 1) / 2 * 65535).astype(np.uint16)
    _write_png(paths["normals"], np.where(n.valid[..., None], enc, 0).astype(np.uint16))
    _write_png(paths["mixed"], (sample.mixed_gt * 255).astype(np.uint8))
    return paths


def read_sample(directory) -> Sample:
    """Load a sample directory. ``normals.png`` and ``mixed.png`` are optional
    (real KITTI completion data carries only color and the two depth maps)."""
    d = Path(directory)
    rgb = _read_png(d / "rgb.png")
    if rgb.dtype != np.uint8 or rgb.ndim != 3:
        raise SampleIOError(d / "rgb.png", "expected 8-bit RGB")
    sparse = _decode_depth(_read_png(d / "sparse.png"))
    dense = _decode_depth(_read_png(d / "dense.png"))
    h, w = dense.shape
    if (d / "normals.png").exists():
        raw = _read_png(d / "normals.png")
        valid = np.any(raw > 0, axis=-1)
        vec = raw.astype(np.float64) / 65535 * 2 - 1
        vec /= np.maximum(np.linalg.norm(vec, axis=-1, keepdims=True), 1e-12)
        normals = NormalMap(vec, valid)
    else:
        normals = NormalMap(np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool))
    if (d / "mixed.png").exists():
        mixed = _read_png(d / "mixed.png") > 0
    else:
        mixed = np.zeros((h, w), dtype=bool)
    return Sample(rgb=rgb.astype(np.float64) / 255.0, sparse=sparse, dense_gt=dense, normals_gt=normals,
                  mixed_gt=mixed & sparse.valid, name=d.name)


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def split_counts(n: int) -> Tuple[int, int]:
    """10:1 train/val split; at least one validation sample once n >= 2."""
    if n < 1:
        raise ValueError("need at least one sample")
    n_val = 0 if n < 2 else max(1, round(n / 11))
    return n - n_val, n_val


def _render_one(args) -> dict:
    index, split, seed, difficulty, root, K = args
    s = sample_seed(seed, index)
    scene = build_scene(s, difficulty)
    rel = f"{split}/{index:05d}"
    sample = raycast_sample(scene, K, LidarPattern(), seed=s, name=rel)
    write_sample(sample, Path(root) / rel)
    return {"index": index, "split": split, "seed": s, "difficulty": difficulty,
            "paths": {k.split(".")[0]: f"{rel}/{k}" for k in FILES}, "camera": K.to_dict()}


def generate_dataset(n: int, seed: int, directory, difficulty: str = "hard",
                     K: Optional[CameraIntrinsics] = None, threads: int = 1) -> Path:
    """Render ``n`` samples (10:1 train/val) and write ``manifest.jsonl``.

    Each sample draws its RNG from (seed, index), so the output does not
    depend on ``threads``."""
    K = K or default_camera()
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    n_train, _ = split_counts(n)
    jobs = [(i, "train" if i < n_train else "val", seed, difficulty, str(root), K) for i in range(n)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_render_one, jobs))
    else:
        records = [_render_one(j) for j in jobs]
    manifest = root / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


# dataset access ----------------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    records: List[dict]

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        manifest = root / "manifest.jsonl"
        if not manifest.exists():
            raise SampleIOError(manifest, "missing manifest")
        with open(manifest) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        return cls(root, records)

    def camera(self) -> CameraIntrinsics:
        if self.records and "camera" in self.records[0]:
            return CameraIntrinsics(**self.records[0]["camera"])
        return default_camera()

    def split(self, name: str) -> List[dict]:
        return [r for r in self.records if r["split"] == name]

    def load(self, record: dict) -> Sample:
        sample = read_sample(self.root / Path(record["paths"]["rgb"]).parent)
        sample.name = str(Path(record["paths"]["rgb"]).parent)
        return sample

    def samples(self, split: str) -> Iterator[Sample]:
        for rec in self.split(split):
            yield self.load(rec)


def collate(samples: Sequence[Sample]) -> Dict[str, np.ndarray]:
    arrays = [s.to_arrays() for s in samples]
    return {k: np.stack([a[k] for a in arrays]) for k in arrays[0]}
