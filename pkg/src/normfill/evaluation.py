"""Benchmark metrics, method evaluation, sparsity sweeps and depth colorization."""

from __future__ import annotations

import csv
import logging
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import matplotlib
import numpy as np

from .baselines import BilateralParams, bilateral_fill, nearest_fill
from .geometry import DepthMap
from .synthdata import SUBSAMPLE_RATIOS, Sample, subsample_sparse

log = logging.getLogger(__name__)

DELTA_BASE = 1.25
PER_SAMPLE_COLUMNS = ("sample_id", "rmse_mm", "mae_mm", "irmse", "imae", "rel", "d1", "d2", "d3", "n_px")
SWEEP_COLUMNS = ("ratio", "density_pct", "rmse_mm", "mae_mm", "irmse", "imae", "rel", "d1", "d2", "d3", "n_px")

Method = Callable[[Sample], DepthMap]


class EmptyEvaluationError(ValueError):
    def __init__(self):
        super().__init__("empty evaluation domain: no pixel is valid in both prediction and ground truth")


@dataclass(frozen=True)
class MetricReport:
    rmse_mm: float
    mae_mm: float
    irmse_per_km: float
    imae_per_km: float
    rel: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int

    def row(self) -> Tuple:
        return astuple(self)


@dataclass
class _Accumulator:
    """Sufficient statistics; merging two is exact, so pooling is associative."""

    n: int = 0
    sq: float = 0.0
    ab: float = 0.0
    isq: float = 0.0
    iab: float = 0.0
    rel: float = 0.0
    d1: int = 0
    d2: int = 0
    d3: int = 0

    def add(self, pred: np.ndarray, gt: np.ndarray) -> "_Accumulator":
        p = pred.astype(np.float64)
        g = gt.astype(np.float64)
        diff_mm = (p - g) * 1000.0
        inv = 1000.0 / p - 1000.0 / g
        ratio = np.maximum(p / g, g / p)
        self.n += p.size
        self.sq += float(np.sum(diff_mm ** 2))
        self.ab += float(np.sum(np.abs(diff_mm)))
        self.isq += float(np.sum(inv ** 2))
        self.iab += float(np.sum(np.abs(inv)))
        self.rel += float(np.sum(np.abs(p - g) / g))
        self.d1 += int(np.sum(ratio < DELTA_BASE))
        self.d2 += int(np.sum(ratio < DELTA_BASE ** 2))
        self.d3 += int(np.sum(ratio < DELTA_BASE ** 3))
        return self

    def merge(self, other: "_Accumulator") -> "_Accumulator":
        return _Accumulator(*(a + b for a, b in zip(astuple(self), astuple(other))))

    def report(self) -> MetricReport:
        if self.n == 0:
            raise EmptyEvaluationError()
        n = self.n
        return MetricReport(np.sqrt(self.sq / n), self.ab / n, np.sqrt(self.isq / n), self.iab / n,
                            self.rel / n, 100.0 * self.d1 / n, 100.0 * self.d2 / n, 100.0 * self.d3 / n, n)


def _pair(pred: DepthMap, gt: DepthMap) -> Tuple[np.ndarray, np.ndarray]:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    m = pred.valid & gt.valid
    return pred.values[m], gt.values[m]


def compute_metrics(pred: DepthMap, gt: DepthMap) -> MetricReport:
    """Errors over pixels valid in both maps. Depth errors in mm, inverse-depth
    errors in 1/km, REL as a fraction, the three delta scores in percent."""
    return _Accumulator().add(*_pair(pred, gt)).report()


# methods -----------------------------------------------------------------------


def nearest_method(sample: Sample) -> DepthMap:
    return nearest_fill(sample.sparse)


def bilateral_method(params: BilateralParams = BilateralParams()) -> Method:
    return lambda sample: bilateral_fill(sample.sparse, sample.rgb, params)


def gt_method(sample: Sample) -> DepthMap:
    return sample.dense_gt


class ModelMethod:
    """Wraps a trained network as a per-sample method (batched internally)."""

    def __init__(self, model, batch_size: int = 4):
        self.model = model
        self.batch_size = batch_size

    def predict_many(self, samples: Sequence[Sample]) -> List[DepthMap]:
        from .training import predict

        outs = predict(self.model, samples, self.batch_size)
        return [DepthMap(o["depth"].astype(np.float64), np.ones(o["depth"].shape, dtype=bool)) for o in outs]

    def __call__(self, sample: Sample) -> DepthMap:
        return self.predict_many([sample])[0]


def _predict_all(method: Method, samples: Sequence[Sample]) -> List[DepthMap]:
    if hasattr(method, "predict_many"):
        return method.predict_many(samples)
    return [method(s) for s in samples]


def evaluate_method(method: Method, samples: Iterable[Sample],
                    csv_path: Optional[Path] = None) -> Tuple[MetricReport, List[Tuple]]:
    """Pixel-pooled aggregate over all samples plus one report row per sample."""
    samples = list(samples)
    if not samples:
        raise ValueError("evaluation split is empty")
    total = _Accumulator()
    rows = []
    for i, (s, pred) in enumerate(zip(samples, _predict_all(method, samples))):
        acc = _Accumulator().add(*_pair(pred, s.dense_gt))
        total = total.merge(acc)
        rows.append((s.name or str(i),) + acc.report().row())
    report = total.report()
    if csv_path is not None:
        _write_csv(csv_path, PER_SAMPLE_COLUMNS, rows)
    return report, rows


def sparsity_sweep(method: Method, samples: Sequence[Sample], ratios: Sequence[float] = SUBSAMPLE_RATIOS,
                   seed: int = 0, csv_path: Optional[Path] = None) -> List[Tuple[float, float, MetricReport]]:
    """Re-evaluate after keeping only ``ratio`` of each sample's sparse returns.

    Returns ``(ratio, density_pct, report)`` per ratio. Density averages over
    every thinned sample; samples left with no return at all are excluded from
    the error metrics, since no method has anything to complete from."""
    samples = list(samples)
    table = []
    for ratio in ratios:
        sub = [subsample_sparse(s, ratio, seed * 1_000_003 + i) for i, s in enumerate(samples)]
        density = 100.0 * np.mean([s.sparse.density() for s in sub])
        usable = [s for s in sub if s.sparse.valid.any()]
        if len(usable) < len(sub):
            log.warning("ratio %g: %d of %d samples kept no sparse return and are skipped",
                        ratio, len(sub) - len(usable), len(sub))
        if not usable:
            raise EmptyEvaluationError()
        report, _ = evaluate_method(method, usable)
        table.append((float(ratio), float(density), report))
    if csv_path is not None:
        _write_csv(csv_path, SWEEP_COLUMNS, [(r, d) + rep.row() for r, d, rep in table])
    return table


def confidence_split(model, samples: Sequence[Sample]) -> Tuple[float, float, int, int]:
    """Mean predicted confidence over mixed sparse pixels and over clean ones."""
    from .training import predict

    mixed, clean = [], []
    for s, out in zip(samples, predict(model, samples, fields=("confidence",))):
        c = out["confidence"]
        mixed.append(c[s.mixed_gt])
        clean.append(c[s.sparse.valid & ~s.mixed_gt])
    mixed = np.concatenate(mixed)
    clean = np.concatenate(clean)
    mean = lambda a: float(a.mean()) if a.size else float("nan")
    return mean(mixed), mean(clean), mixed.size, clean.size


def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


# rendering ---------------------------------------------------------------------

_TURBO = (np.asarray(matplotlib.colormaps["turbo"](np.linspace(0, 1, 256))[:, :3]) * 255).round().astype(np.uint8)


def colormap_index(depth: DepthMap, value_range: Tuple[float, float]) -> np.ndarray:
    lo, hi = value_range
    if not lo < hi:
        raise ValueError(f"range minimum must be below maximum, got {value_range}")
    t = (np.clip(depth.values, lo, hi) - lo) / (hi - lo)
    return np.round(t * 255).astype(np.uint8)


def render_depth(depth: DepthMap, value_range: Tuple[float, float] = (0.0, 80.0)) -> np.ndarray:
    """H x W x 3 uint8 turbo rendering; out-of-range values clamp, invalid pixels are black."""
    img = _TURBO[colormap_index(depth, value_range)]
    img[~depth.valid] = 0
    return img
