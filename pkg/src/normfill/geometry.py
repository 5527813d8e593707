"""Pinhole camera and LiDAR geometry.

Camera frame: x right, y down, z forward. Pixel (row v, column u) has its
center at integer image coordinates. Normals are oriented camera-facing, i.e.
``dot(n, X) < 0`` for the surface point ``X`` they belong to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .autodiff.functional import concat_channels

Z_MAX = 80.0
TAU_MIX = 1.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                                int(round(self.width * factor)), int(round(self.height * factor)))

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)


def default_camera() -> CameraIntrinsics:
    """64x192 camera, roughly KITTI's field of view at 1/6 resolution."""
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=96.0, cy=32.0, width=192, height=64)


@dataclass(frozen=True)
class RigidTransform:
    """Maps points from a source frame into the camera frame: ``R @ p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(t, dtype=float))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass
class DepthMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ValueError("values and valid must be matching HxW arrays")
        self.values = np.where(self.valid, self.values, 0.0)
        if np.any(self.values[self.valid] <= 0):
            raise ValueError("valid depths must be positive")

    @classmethod
    def from_dense(cls, values: np.ndarray, z_max: float = Z_MAX) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        valid = np.isfinite(values) & (values > 0) & (values <= z_max)
        return cls(np.where(valid, values, 0.0), valid)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def density(self) -> float:
        return float(self.valid.mean())


@dataclass
class NormalMap:
    vectors: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.vectors.shape != self.valid.shape + (3,):
            raise ValueError("vectors must be HxWx3 matching valid")
        self.vectors = np.where(self.valid[..., None], self.vectors, 0.0)


# projection ---------------------------------------------------------------


def project(point, K: CameraIntrinsics) -> Tuple[float, float, float]:
    x, y, z = (float(c) for c in point)
    if z <= 0:
        raise ValueError("behind camera: point has z <= 0")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, z


def unproject(u: float, v: float, depth: float, K: CameraIntrinsics) -> np.ndarray:
    if depth <= 0:
        raise ValueError("depth must be positive to unproject")
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])


def project_points(points: np.ndarray, K: CameraIntrinsics):
    """Vectorised projection of (N,3) points; caller filters z <= 0."""
    p = np.asarray(points, dtype=float)
    z = p[:, 2]
    return K.fx * p[:, 0] / z + K.cx, K.fy * p[:, 1] / z + K.cy, z


def pixel_rays(K: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) ray directions with unit z through every pixel center."""
    v, u = np.mgrid[0:K.height, 0:K.width].astype(float)
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def unproject_depth(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    return pixel_rays(K) * np.asarray(depth, dtype=float)[..., None]


def depth_to_points(depth: DepthMap, K: CameraIntrinsics) -> np.ndarray:
    return unproject_depth(depth.values, K)[depth.valid]


def _pixel_index(points: np.ndarray, K: CameraIntrinsics, z_max: float):
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    front = p[:, 2] > 0
    idx = np.flatnonzero(front)
    u, v, z = project_points(p[front], K)
    col = np.floor(u + 0.5).astype(np.int64)
    row = np.floor(v + 0.5).astype(np.int64)
    keep = (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height) & (z <= z_max)
    return idx[keep], row[keep] * K.width + col[keep], z[keep]


def rasterize_zbuffer(points: np.ndarray, K: CameraIntrinsics, z_max: float = Z_MAX) -> DepthMap:
    """Nearest-depth-wins splat of camera-frame points, one pixel each."""
    _, flat, z = _pixel_index(points, K, z_max)
    buf = np.full(K.height * K.width, np.inf)
    np.minimum.at(buf, flat, z)
    buf = buf.reshape(K.height, K.width)
    valid = np.isfinite(buf)
    return DepthMap(np.where(valid, buf, 0.0), valid)


def warp_lidar_to_camera(points: np.ndarray, T: RigidTransform, K: CameraIntrinsics,
                         scene_points: Optional[np.ndarray] = None, tau_mix: float = TAU_MIX,
                         z_max: float = Z_MAX) -> Tuple[DepthMap, np.ndarray]:
    """Project LiDAR-frame points into the camera with no visibility test.

    Colliding returns keep the last-written point (scan order). A pixel is
    flagged mixed when its projected depth exceeds the z-buffer depth of
    ``scene_points`` (camera frame; defaults to the warped points) by more
    than ``tau_mix``.
    """
    cam = T.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    order, flat, z = _pixel_index(cam, K, z_max)
    last = np.full(K.height * K.width, -1, dtype=np.int64)
    np.maximum.at(last, flat, np.arange(len(flat)))
    hit = last >= 0
    values = np.zeros(K.height * K.width)
    values[hit] = z[last[hit]]
    sparse = DepthMap(values.reshape(K.height, K.width), hit.reshape(K.height, K.width))

    oracle = rasterize_zbuffer(cam if scene_points is None else scene_points, K, z_max)
    mixed = sparse.valid & oracle.valid & (sparse.values - oracle.values > tau_mix)
    return sparse, mixed


# normals --------------------------------------------------------------------


def _orient(normals: np.ndarray, points: np.ndarray) -> np.ndarray:
    flip = np.sum(normals * points, axis=-1) > 0
    return np.where(flip[..., None], -normals, normals)


def fit_plane_normals(depth: DepthMap, K: CameraIntrinsics, window: int = 5) -> NormalMap:
    """Least-squares plane through each pixel's valid window neighbours.

    The normal is the eigenvector of the smallest eigenvalue of the centered
    covariance. Fewer than 3 valid points, or a rank-deficient (collinear)
    neighbourhood, leaves the pixel invalid.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    h, w = depth.shape
    r = window // 2
    pts = unproject_depth(depth.values, K)
    valid = depth.valid
    pp = np.pad(pts, ((r, r), (r, r), (0, 0)))
    vp = np.pad(valid, r)

    count = np.zeros((h, w))
    s1 = np.zeros((h, w, 3))
    s2 = np.zeros((h, w, 3, 3))
    for dy in range(window):
        for dx in range(window):
            m = vp[dy: dy + h, dx: dx + w].astype(float)
            # offsets from the center point keep the covariance well conditioned
            q = (pp[dy: dy + h, dx: dx + w] - pts) * m[..., None]
            count += m
            s1 += q
            s2 += q[..., :, None] * q[..., None, :]
    n = np.maximum(count, 1.0)
    mean = s1 / n[..., None]
    cov = s2 / n[..., None, None] - mean[..., :, None] * mean[..., None, :]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[..., :, 0]
    scale = np.maximum(evals[..., 2], 1e-300)
    ok = valid & (count >= 3) & (evals[..., 1] > 1e-12 * scale) & (evals[..., 2] > 0)
    normals = _orient(normals, pts)
    normals /= np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), 1e-300)
    return NormalMap(normals, ok)


def normals_from_depth(depth: DepthMap, K: CameraIntrinsics) -> NormalMap:
    """Cross product of central-difference tangents of the unprojected map.

    Border pixels and pixels with an invalid 4-neighbour are invalid."""
    pts = unproject_depth(depth.values, K)
    h, w = depth.shape
    out = np.zeros((h, w, 3))
    t_u = pts[1:-1, 2:] - pts[1:-1, :-2]
    t_v = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(t_v, t_u)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    out[1:-1, 1:-1] = n / np.maximum(norm, 1e-300)
    valid = np.zeros((h, w), dtype=bool)
    v = depth.valid
    valid[1:-1, 1:-1] = interior_normal_mask(v) & (norm[..., 0] > 0)
    return NormalMap(out, valid)


def interior_normal_mask(valid: np.ndarray) -> np.ndarray:
    """Validity of the central-difference normal on the (H-2, W-2) interior;
    accepts [..., H, W] boolean masks."""
    v = np.asarray(valid, dtype=bool)
    return (v[..., 1:-1, 1:-1] & v[..., 1:-1, 2:] & v[..., 1:-1, :-2]
            & v[..., 2:, 1:-1] & v[..., :-2, 1:-1])


def normals_from_depth_tensor(depth: Tensor, K: CameraIntrinsics, eps: float = 1e-8) -> Tensor:
    """Differentiable twin of :func:`normals_from_depth` for a [B,1,H,W] tensor.

    Returns unit normals [B,3,H-2,W-2] for the image interior."""
    if depth.shape[2:] != (K.height, K.width):
        raise ValueError(f"depth {depth.shape[2:]} does not match camera {K.height}x{K.width}")
    rays = pixel_rays(K)
    rx = rays[None, None, :, :, 0]
    ry = rays[None, None, :, :, 1]
    x = depth * rx
    y = depth * ry
    z = depth

    def du(a):
        return a[:, :, 1:-1, 2:] - a[:, :, 1:-1, :-2]

    def dv(a):
        return a[:, :, 2:, 1:-1] - a[:, :, :-2, 1:-1]

    ux, uy, uz = du(x), du(y), du(z)
    vx, vy, vz = dv(x), dv(y), dv(z)
    # n = t_v x t_u
    nx = vy * uz - vz * uy
    ny = vz * ux - vx * uz
    nz = vx * uy - vy * ux
    norm = (nx * nx + ny * ny + nz * nz + eps).sqrt()
    return concat_channels(nx / norm, ny / norm, nz / norm)


def angular_error_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


# sensitivity of depth-from-normal -----------------------------------------


def ground_pixel(z: float, K: CameraIntrinsics, camera_height: float = 1.5) -> Tuple[float, float]:
    """Image position of the ground point straight ahead at depth ``z``."""
    return K.cx, K.cy + K.fy * camera_height / z


def normal_depth_sensitivity(z: float, normal, perturb_deg: float, pixel_offset: int,
                             K: CameraIntrinsics, pixel: Optional[Tuple[float, float]] = None,
                             n_azimuths: int = 3600) -> float:
    """Depth error at a neighbouring pixel when the plane normal is wrong.

    A plane with ``normal`` passes through the point seen at ``pixel``
    (default: principal point) at depth ``z``. The neighbour ``pixel_offset``
    rows away is intersected with this plane and with the plane tilted by
    ``perturb_deg``; the largest depth difference over tilt azimuths is
    returned. If some tilt makes the plane parallel to the neighbour ray (or
    puts the intersection behind the camera) the result is ``inf``.
    """
    if z <= 0:
        raise ValueError("depth must be positive")
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    u0, v0 = (K.cx, K.cy) if pixel is None else pixel
    x0 = unproject(u0, v0, z, K)
    r1 = np.array([(u0 - K.cx) / K.fx, (v0 + pixel_offset - K.cy) / K.fy, 1.0])
    denom_true = n @ r1
    if abs(denom_true) < 1e-15:
        return float("inf")
    z_true = (n @ x0) / denom_true
    theta = np.radians(perturb_deg)
    if theta == 0:
        return 0.0
    # orthonormal basis of the plane perpendicular to n
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    # n'(phi) . r1 = cos(t) n.r1 + sin(t) (cos(phi) e1.r1 + sin(phi) e2.r1)
    amp = np.sin(theta) * np.hypot(e1 @ r1, e2 @ r1)
    base = np.cos(theta) * denom_true
    if abs(base) <= amp:
        return float("inf")
    phi = np.linspace(0.0, 2 * np.pi, n_azimuths, endpoint=False)
    n_p = (np.cos(theta) * n[None, :]
           + np.sin(theta) * (np.cos(phi)[:, None] * e1[None, :] + np.sin(phi)[:, None] * e2[None, :]))
    z_p = (n_p @ x0) / (n_p @ r1)
    if np.any(z_p <= 0):
        return float("inf")
    return float(np.max(np.abs(z_p - z_true)))
