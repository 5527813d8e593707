"""Non-learned depth completion: nearest-neighbour and color-guided bilateral fill."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DepthMap


class EmptySparseError(ValueError):
    def __init__(self):
        super().__init__("sparse map has no valid pixels")


@dataclass(frozen=True)
class BilateralParams:
    sigma_spatial: float = 4.0
    sigma_color: float = 0.1
    radius: int = 7
    max_iterations: int = 10

    def __post_init__(self):
        if self.sigma_spatial <= 0 or self.sigma_color <= 0:
            raise ValueError("sigmas must be positive")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


def nearest_fill(sparse: DepthMap) -> DepthMap:
    """Copy the depth of the Euclidean-nearest valid pixel.

    Ties go to the smaller row, then the smaller column."""
    valid = sparse.valid
    if not valid.any():
        raise EmptySparseError()
    h, w = valid.shape
    src = np.argwhere(valid)  # row-major, so position order == (row, col) order
    holes = np.argwhere(~valid)
    out = sparse.values.copy()
    if len(holes) == 0:
        return DepthMap(out, np.ones_like(valid))
    tree = cKDTree(src)
    k = min(16, len(src))
    _, idx = tree.query(holes, k=k)
    idx = idx.reshape(len(holes), k)
    d2 = ((src[idx] - holes[:, None, :]) ** 2).sum(axis=-1)  # exact integers
    best = d2.min(axis=1)
    # the smallest source index among exact ties is the (row, col)-smallest pixel
    choice = np.where(d2 == best[:, None], idx, len(src)).min(axis=1)
    # more ties than neighbours fetched: resolve with an exact ball query
    crowded = np.flatnonzero((d2 == best[:, None]).all(axis=1) & (k < len(src)))
    for i in crowded:
        cand = np.asarray(tree.query_ball_point(holes[i], np.sqrt(best[i]) + 1e-9))
        cd2 = ((src[cand] - holes[i]) ** 2).sum(axis=-1)
        choice[i] = cand[cd2 == cd2.min()].min()
    r, c = src[choice].T
    out[holes[:, 0], holes[:, 1]] = sparse.values[r, c]
    return DepthMap(out, np.ones((h, w), dtype=bool))


def bilateral_fill(sparse: DepthMap, rgb: np.ndarray, params: BilateralParams = BilateralParams()) -> DepthMap:
    """Iterated joint bilateral interpolation guided by ``rgb`` (H x W x 3, [0, 1]).

    Each pass fills missing pixels from valid window neighbours of the
    previous pass; remaining holes fall back to :func:`nearest_fill`."""
    if not sparse.valid.any():
        raise EmptySparseError()
    img = np.asarray(rgb, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w = sparse.shape
    r = params.radius
    depth = sparse.values.copy()
    valid = sparse.valid.copy()
    img_p = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy or dx]
    spatial = {o: np.exp(-(o[0] ** 2 + o[1] ** 2) / (2 * params.sigma_spatial ** 2)) for o in offsets}
    color = {}
    for dy, dx in offsets:
        diff = img_p[r + dy: r + dy + h, r + dx: r + dx + w] - img
        color[dy, dx] = np.exp(-(diff ** 2).sum(axis=-1) / (2 * params.sigma_color ** 2))

    for _ in range(params.max_iterations):
        if valid.all():
            break
        d_p = np.pad(depth, r)
        v_p = np.pad(valid, r)
        num = np.zeros((h, w))
        den = np.zeros((h, w))
        for dy, dx in offsets:
            vn = v_p[r + dy: r + dy + h, r + dx: r + dx + w]
            wgt = spatial[dy, dx] * color[dy, dx] * vn
            num += wgt * d_p[r + dy: r + dy + h, r + dx: r + dx + w]
            den += wgt
        fill = ~valid & (den > 0)
        if not fill.any():
            break
        depth = np.where(fill, num / np.where(fill, den, 1.0), depth)
        valid = valid | fill

    current = DepthMap(depth, valid)
    return current if valid.all() else nearest_fill(current)
