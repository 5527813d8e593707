"""Static figures: per-sample prediction panels and sparsity-sweep curves."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MetricReport, render_depth  # noqa: E402
from .geometry import DepthMap  # noqa: E402
from .synthdata import Sample  # noqa: E402

PANEL_ORDER = ("rgb", "sparse", "depth_color", "depth_normal", "w_normal", "confidence", "normals", "depth", "gt")
PANEL_TITLES = {
    "rgb": "RGB", "sparse": "sparse LiDAR", "depth_color": "color-pathway depth",
    "depth_normal": "normal-pathway depth", "w_normal": "normal-pathway weight",
    "confidence": "confidence", "normals": "normals", "depth": "final depth", "gt": "ground truth",
}


def _dense(a: np.ndarray) -> DepthMap:
    return DepthMap(a.astype(np.float64), np.ones(a.shape, dtype=bool))


def panel_images(sample: Sample, outputs: Dict[str, np.ndarray],
                 depth_range: Tuple[float, float] = (0.0, 80.0)) -> Dict[str, np.ndarray]:
    """RGB images for each panel; outputs the variant lacks are left blank."""
    h, w = sample.sparse.shape
    blank = np.zeros((h, w, 3), dtype=np.uint8)
    gray = lambda a: np.repeat((np.clip(a, 0, 1) * 255).round().astype(np.uint8)[..., None], 3, axis=-1)
    imgs = {
        "rgb": (np.clip(sample.rgb, 0, 1) * 255).round().astype(np.uint8),
        "sparse": render_depth(sample.sparse, depth_range),
        "gt": render_depth(sample.dense_gt, depth_range),
    }
    for key in ("depth_color", "depth_normal", "depth"):
        imgs[key] = render_depth(_dense(outputs[key]), depth_range) if outputs.get(key) is not None else blank
    for key in ("w_normal", "confidence"):
        imgs[key] = gray(outputs[key]) if outputs.get(key) is not None else blank
    n = outputs.get("normals")
    imgs["normals"] = ((n.transpose(1, 2, 0) + 1) / 2 * 255).round().clip(0, 255).astype(np.uint8) \
        if n is not None else blank
    return imgs


def save_panel(sample: Sample, outputs: Dict[str, np.ndarray], path,
               depth_range: Tuple[float, float] = (0.0, 80.0)) -> Path:
    imgs = panel_images(sample, outputs, depth_range)
    fig, axes = plt.subplots(len(PANEL_ORDER), 1, figsize=(6, 1.2 * len(PANEL_ORDER)))
    for ax, key in zip(axes, PANEL_ORDER):
        ax.imshow(imgs[key], interpolation="nearest")
        ax.set_title(PANEL_TITLES[key], fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_sweep_plot(table: Sequence[Tuple[float, float, MetricReport]], path, label: str = "") -> Path:
    density = [d for _, d, _ in table]
    rmse = [r.rmse_mm for _, _, r in table]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(density, rmse, "o-", label=label or None)
    ax.set_xscale("log")
    ax.set_xlabel("sparse density (% of pixels)")
    ax.set_ylabel("RMSE (mm)")
    ax.grid(True, which="both", alpha=0.3)
    if label:
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
