"""Weighted multi-term loss, staged Adam schedule, logging and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config as cfgio
from .autodiff import AdamState, NonFiniteError, Tensor, adam_step, no_grad
from .autodiff import checkpoint
from .autodiff.functional import cosine_loss, masked_l2_loss
from .geometry import CameraIntrinsics, DepthMap, default_camera, normals_from_depth, normals_from_depth_tensor
from .model import DepthCompletionNet, ModelOutput
from .synthdata import Sample, collate

log = logging.getLogger(__name__)

NORMAL_CONSISTENCY_WEIGHT = 0.5
LOG_COLUMNS = ("epoch", "stage", "lr", "L_total", "L_n", "L_d_c", "L_d_n", "L_d_final", "val_rmse_mm")

# loss term -> (weight attribute, output field)
TERMS = {
    "L_d_n": ("l1", "depth_normal"),
    "L_d_c": ("l2", "depth_color"),
    "L_d_final": ("l3", "depth"),
    "L_n": ("l4", "normals"),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, term: str, epoch: int, last_good: Optional[Path]):
        where = f"; last good checkpoint: {last_good}" if last_good else ""
        super().__init__(f"non-finite value in loss term {term} at epoch {epoch}{where}")
        self.term = term
        self.epoch = epoch
        self.last_good = last_good


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.0  # depth from the normal pathway
    l2: float = 0.0  # depth from the color pathway
    l3: float = 0.0  # blended depth
    l4: float = 0.0  # normals

    def __post_init__(self):
        values = dataclasses.astuple(self)
        if any(v < 0 for v in values):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in values):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class Schedule:
    stages: List[Tuple[LossWeights, int]]
    lr0: float = 1e-3
    halve_every: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 2

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        for _, epochs in self.stages:
            if epochs < 1:
                raise ValueError("every stage needs at least one epoch")

    @classmethod
    def default(cls, epochs: Sequence[int] = (5, 5, 10), **kw) -> "Schedule":
        weights = (LossWeights(l4=1.0),
                   LossWeights(l1=0.3, l2=0.3, l3=0.0, l4=0.1),
                   LossWeights(l1=0.3, l2=0.3, l3=0.5, l4=0.1))
        if len(epochs) != 3:
            raise ValueError("the default schedule has three stages")
        return cls(list(zip(weights, (int(e) for e in epochs))), **kw)

    def lr(self, epoch: int) -> float:
        return self.lr0 * 0.5 ** (epoch // self.halve_every)

    @property
    def total_epochs(self) -> int:
        return sum(e for _, e in self.stages)

    def to_dict(self) -> dict:
        return {"stages": [{**dataclasses.asdict(w), "epochs": e} for w, e in self.stages],
                "lr0": self.lr0, "halve_every": self.halve_every, "beta1": self.beta1,
                "beta2": self.beta2, "batch_size": self.batch_size}

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        d = dict(d)
        stages = [(LossWeights(**{k: v for k, v in s.items() if k != "epochs"}), int(s["epochs"]))
                  for s in d.pop("stages")]
        return cls(stages, **d)


# losses ------------------------------------------------------------------------


def _gt_interior_normals(gt_depth: np.ndarray, gt_mask: np.ndarray, K: CameraIntrinsics):
    vecs, masks = [], []
    for d, m in zip(gt_depth[:, 0], gt_mask[:, 0]):
        n = normals_from_depth(DepthMap(d, m > 0), K)
        vecs.append(n.vectors[1:-1, 1:-1].transpose(2, 0, 1))
        masks.append(n.valid[1:-1, 1:-1][None])
    return np.stack(vecs), np.stack(masks).astype(np.float32)


def depth_loss(pred: Tensor, gt_depth: np.ndarray, gt_mask: np.ndarray, K: CameraIntrinsics,
               mu: float = NORMAL_CONSISTENCY_WEIGHT) -> Tensor:
    """Masked L2 on depth plus ``mu`` times the cosine loss between normals
    computed from the predicted and ground-truth depth.

    The normal term covers interior pixels whose ground-truth normal is
    defined; it is dropped when there are none."""
    gt_mask = np.asarray(gt_mask, dtype=np.float32)
    loss = masked_l2_loss(pred, gt_depth, gt_mask)
    if mu == 0:
        return loss
    gt_n, n_mask = _gt_interior_normals(np.asarray(gt_depth), gt_mask, K)
    if n_mask.sum() == 0:
        return loss
    pred_n = normals_from_depth_tensor(pred, K)
    return loss + cosine_loss(pred_n, gt_n, n_mask) * mu


def needed_outputs(w: LossWeights, model: DepthCompletionNet) -> List[str]:
    """Output fields the active terms need; terms the variant cannot produce are dropped."""
    available = {"depth", "depth_color"}
    if model.cfg.use_normal_pathway:
        available |= {"depth_normal", "normals"}
    return [f for name, (attr, f) in TERMS.items() if getattr(w, attr) > 0 and f in available]


def total_loss(out: ModelOutput, batch: Dict[str, np.ndarray], w: LossWeights,
               K: CameraIntrinsics) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted sum of the active terms. Terms with zero weight, or whose
    output the model did not produce, are not evaluated."""
    total = None
    terms: Dict[str, float] = {}
    for name, (attr, fld) in TERMS.items():
        lam = getattr(w, attr)
        pred = getattr(out, fld)
        if lam == 0 or pred is None:
            continue
        try:
            if name == "L_n":
                value = cosine_loss(pred, batch["gt_normals"], batch["gt_normal_mask"])
            else:
                value = depth_loss(pred, batch["gt_depth"], batch["gt_mask"], K)
        except NonFiniteError as exc:
            raise NonFiniteError(f"{name}/{exc.op}", exc.where) from exc
        terms[name] = float(value.data)
        total = value * lam if total is None else total + value * lam
    if total is None:
        raise ValueError("no active loss term for this model")
    return total, terms


# evaluation helpers -------------------------------------------------------------


def predict(model: DepthCompletionNet, samples: Sequence[Sample], batch_size: int = 4,
            fields: Sequence[str] = ("depth",)) -> List[Dict[str, np.ndarray]]:
    """Inference without the tape; one dict of HxW (or 3xHxW) arrays per sample."""
    results = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i: i + batch_size]
            out = model.forward(collate(chunk), need=fields)
            for b in range(len(chunk)):
                results.append({f: getattr(out, f).data[b].squeeze(0) if getattr(out, f).shape[1] == 1
                                else getattr(out, f).data[b] for f in fields})
    return results


def pooled_rmse_mm(model: DepthCompletionNet, samples: Sequence[Sample]) -> float:
    sq, n = 0.0, 0
    for s, p in zip(samples, predict(model, samples)):
        m = s.dense_gt.valid
        err = p["depth"][m].astype(np.float64) - s.dense_gt.values[m]
        sq += float(np.sum(err ** 2))
        n += int(m.sum())
    return 1000.0 * np.sqrt(sq / n)


# schedule driver ---------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Optional[Path]
    log_path: Path
    initial_val_rmse_mm: float
    best_val_rmse_mm: float
    final_val_rmse_mm: float
    history: List[Dict[str, float]] = field(default_factory=list)


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def save_model(model: DepthCompletionNet, directory, name: str = "model") -> Path:
    directory = Path(directory)
    path = checkpoint.save(directory / f"{name}.ckpt", model.state_dict())
    cfgio.write_toml(directory / f"{name}.toml", {"model": model.cfg.to_dict()})
    return path


def load_model(ckpt_path) -> DepthCompletionNet:
    """Rebuild a network from ``<name>.ckpt`` and the ``<name>.toml`` beside it."""
    from .model import ModelConfig

    ckpt_path = Path(ckpt_path)
    cfg = ModelConfig.from_dict(cfgio.read_toml(ckpt_path.with_suffix(".toml"))["model"])
    model = DepthCompletionNet(cfg)
    model.load_state_dict(checkpoint.load(ckpt_path))
    return model


def run_schedule(model: DepthCompletionNet, train: Sequence[Sample], val: Sequence[Sample],
                 schedule: Schedule, seed: int, out_dir, K: Optional[CameraIntrinsics] = None) -> TrainResult:
    """Train through every stage, validating after each epoch.

    The learning-rate epoch counter runs on across stage boundaries. A stage
    with no term the model can produce is skipped, but still advances that
    counter. The best validation checkpoint is kept as ``model.ckpt``."""
    if not train:
        raise ValueError("training set is empty")
    val = list(val) if val else list(train)
    K = K or default_camera()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.csv"
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = AdamState(lr=schedule.lr0, beta1=schedule.beta1, beta2=schedule.beta2)

    initial = pooled_rmse_mm(model, val)
    best = np.inf
    best_path: Optional[Path] = None
    history: List[Dict[str, float]] = []
    epoch = 0
    last = initial
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for stage_idx, (weights, n_epochs) in enumerate(schedule.stages, start=1):
            need = needed_outputs(weights, model)
            if not need:
                log.info("stage %d has no active term for this variant; skipped", stage_idx)
                epoch += n_epochs
                continue
            for _ in range(n_epochs):
                opt.lr = schedule.lr(epoch)
                order = rng.permutation(len(train))
                sums: Dict[str, float] = {}
                n_batches = 0
                for start in range(0, len(order), schedule.batch_size):
                    batch = collate([train[i] for i in order[start: start + schedule.batch_size]])
                    try:
                        out = model.forward(batch, need=need)
                        loss, terms = total_loss(out, batch, weights, K)
                        model.zero_grad()
                        loss.backward()
                    except NonFiniteError as exc:
                        raise TrainingDiverged(exc.op, epoch, best_path) from exc
                    adam_step(params, opt)
                    for k, v in terms.items():
                        sums[k] = sums.get(k, 0.0) + v
                    sums["L_total"] = sums.get("L_total", 0.0) + float(loss.data)
                    n_batches += 1
                last = pooled_rmse_mm(model, val)
                row = {"epoch": epoch, "stage": stage_idx, "lr": opt.lr,
                       **{k: v / n_batches for k, v in sums.items()}, "val_rmse_mm": last}
                history.append(row)
                writer.writerow([_fmt(row.get(c)) for c in LOG_COLUMNS])
                fh.flush()
                log.info("epoch %d stage %d loss %.4f val %.1f mm", epoch, stage_idx,
                         row["L_total"], last)
                if last < best:
                    best = last
                    best_path = save_model(model, out_dir)
                epoch += 1
    return TrainResult(best_path, log_path, initial, float(best), float(last), history)
