"""Command-line entry point: ``normfill <command> [options]``.

Every command writes its fully resolved settings to ``config.toml`` in its
output directory; passing that file back with ``--config`` repeats the run.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from threadpoolctl import threadpool_limits

from . import config as cfgio
from .model import VARIANTS, DepthCompletionNet, ModelConfig, make_variant

log = logging.getLogger("normfill")

DEFAULTS = {
    "gen-data": {"n": 220, "seed": 0, "difficulty": "hard", "out": "data"},
    "train": {"data": "data", "variant": "full", "epochs_per_stage": [5, 5, 10], "out": "runs/full", "seed": 0},
    "eval": {"data": "data", "method": "nearest", "split": "val", "out": "eval"},
    "ablate": {"data": "data", "epochs_per_stage": [5, 5, 10], "out": "ablation", "seed": 0},
    "sweep": {"data": "data", "method": "nearest", "split": "val", "out": "sweep", "seed": 0},
    "render": {"sample": None, "ckpt": None, "out": "panel.png"},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with defaults for this command")
    common.add_argument("--threads", type=int, help="bound on worker threads (default: all cores)")
    common.add_argument("--seed", type=int, help="random seed (fallback: $NORMFILL_SEED, then 0)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="normfill", description="Normal-guided depth completion toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    g.add_argument("--n", type=int)
    g.add_argument("--difficulty", choices=["easy", "hard"])
    g.add_argument("--out")

    t = sub.add_parser("train", parents=[common], help="train one model variant")
    t.add_argument("--data")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--epochs-per-stage", type=int, nargs=3, metavar=("S1", "S2", "S3"))
    t.add_argument("--out")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or baseline")
    e.add_argument("--data")
    e.add_argument("--method", help="checkpoint path, 'nearest', 'bilateral' or 'gt'")
    e.add_argument("--split", choices=["train", "val"])
    e.add_argument("--out")

    a = sub.add_parser("ablate", parents=[common], help="train and compare all five variants")
    a.add_argument("--data")
    a.add_argument("--epochs-per-stage", type=int, nargs=3, metavar=("S1", "S2", "S3"))
    a.add_argument("--out")

    s = sub.add_parser("sweep", parents=[common], help="RMSE versus input sparsity")
    s.add_argument("--data")
    s.add_argument("--method")
    s.add_argument("--split", choices=["train", "val"])
    s.add_argument("--out")

    r = sub.add_parser("render", parents=[common], help="qualitative panel for one sample")
    r.add_argument("--sample", help="sample directory")
    r.add_argument("--ckpt")
    r.add_argument("--out")
    return p


def resolve(args: argparse.Namespace) -> Dict:
    """Built-in defaults < config file < environment seed < explicit flags."""
    cmd = args.command
    settings = dict(DEFAULTS[cmd])
    settings["threads"] = os.cpu_count() or 1
    section = cfgio.read_toml(args.config).get(cmd, {}) if args.config else {}
    unknown = set(section) - set(settings)
    if unknown:
        raise UsageError(f"unknown keys in [{cmd}] of {args.config}: {sorted(unknown)}")
    settings.update(section)
    env_seed = os.environ.get("NORMFILL_SEED")
    if "seed" in settings and "seed" not in section and env_seed:
        try:
            settings["seed"] = int(env_seed)
        except ValueError as exc:
            raise UsageError("NORMFILL_SEED must be an integer") from exc
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose") or value is None:
            continue
        settings[key] = value
    if settings.get("threads", 1) < 1:
        raise UsageError("--threads must be >= 1")
    missing = [k for k, v in settings.items() if v is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return settings


def _write_resolved(cmd: str, settings: Dict, directory: Path) -> Path:
    return cfgio.write_toml(Path(directory) / "config.toml", {"command": cmd, cmd: settings})


def _load_split(data_dir, split: str):
    from .synthdata import Dataset

    ds = Dataset.open(data_dir)
    samples = list(ds.samples(split))
    if not samples:
        raise RuntimeError(f"split {split!r} of {data_dir} is empty")
    return ds, samples


def _method(spec: str):
    from .evaluation import ModelMethod, bilateral_method, gt_method, nearest_method
    from .training import load_model

    if spec == "nearest":
        return nearest_method
    if spec == "bilateral":
        return bilateral_method()
    if spec == "gt":
        return gt_method
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"method must be 'nearest', 'bilateral', 'gt' or an existing checkpoint; got {spec!r}")
    return ModelMethod(load_model(path))


def _train_variant(variant: str, data: str, epochs, out: Path, seed: int):
    from .synthdata import Dataset
    from .training import Schedule, run_schedule

    ds = Dataset.open(data)
    train = list(ds.samples("train"))
    val = list(ds.samples("val"))
    model = DepthCompletionNet(make_variant(ModelConfig(seed=seed), variant))
    return run_schedule(model, train, val, Schedule.default(epochs), seed, out, K=ds.camera())


# commands ------------------------------------------------------------------------


def cmd_gen_data(s: Dict) -> int:
    from .synthdata import generate_dataset

    out = Path(s["out"])
    manifest = generate_dataset(s["n"], s["seed"], out, s["difficulty"], threads=s["threads"])
    _write_resolved("gen-data", s, out)
    print(f"wrote {s['n']} samples, manifest {manifest}")
    return 0


def cmd_train(s: Dict) -> int:
    out = Path(s["out"])
    _write_resolved("train", s, out)
    res = _train_variant(s["variant"], s["data"], s["epochs_per_stage"], out, s["seed"])
    print(f"val RMSE: untrained {res.initial_val_rmse_mm:.1f} mm, best {res.best_val_rmse_mm:.1f} mm")
    print(f"checkpoint {res.checkpoint}, log {res.log_path}")
    return 0


def _summary(report) -> str:
    return (f"RMSE {report.rmse_mm:.1f} mm  MAE {report.mae_mm:.1f} mm  iRMSE {report.irmse_per_km:.2f} /km  "
            f"iMAE {report.imae_per_km:.2f} /km  REL {report.rel:.4f}  "
            f"d1 {report.delta1:.2f}%  d2 {report.delta2:.2f}%  d3 {report.delta3:.2f}%  n {report.n_pixels}")


def cmd_eval(s: Dict) -> int:
    from .evaluation import evaluate_method

    method = _method(s["method"])
    _, samples = _load_split(s["data"], s["split"])
    out = Path(s["out"])
    report, _ = evaluate_method(method, samples, csv_path=out / "per_sample.csv")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("method",) + tuple(report.__dataclass_fields__))
        w.writerow((s["method"],) + report.row())
    _write_resolved("eval", s, out)
    print(_summary(report))
    return 0


def cmd_ablate(s: Dict) -> int:
    from .evaluation import ModelMethod, evaluate_method
    from .training import load_model

    out = Path(s["out"])
    _write_resolved("ablate", s, out)
    _, val = _load_split(s["data"], "val")
    rows = []
    for variant in VARIANTS:
        res = _train_variant(variant, s["data"], s["epochs_per_stage"], out / variant, s["seed"])
        final_loss = res.history[-1]["L_total"] if res.history else float("nan")
        report, _ = evaluate_method(ModelMethod(load_model(res.checkpoint)), val)
        rows.append((variant, final_loss, report.rmse_mm, report.mae_mm, report.irmse_per_km,
                     report.imae_per_km))
        print(f"{variant:14s} {_summary(report)}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant", "final_train_loss", "rmse_mm", "mae_mm", "irmse", "imae"))
        w.writerows(rows)
    return 0


def cmd_sweep(s: Dict) -> int:
    from .evaluation import sparsity_sweep
    from .plotting import save_sweep_plot

    method = _method(s["method"])
    _, samples = _load_split(s["data"], s["split"])
    out = Path(s["out"])
    table = sparsity_sweep(method, samples, seed=s["seed"], csv_path=out / "sweep.csv")
    save_sweep_plot(table, out / "sweep.png", label=Path(s["method"]).stem)
    _write_resolved("sweep", s, out)
    for ratio, density, rep in table:
        print(f"ratio {ratio:<10.6g} density {density:7.4f}%  RMSE {rep.rmse_mm:.1f} mm")
    return 0


def cmd_render(s: Dict) -> int:
    from .plotting import save_panel
    from .synthdata import read_sample
    from .training import load_model, predict

    sample = read_sample(s["sample"])
    model = load_model(s["ckpt"])
    fields = ["depth", "depth_color", "confidence"]
    if model.cfg.use_normal_pathway:
        fields += ["depth_normal", "normals"]
        if model.cfg.use_attention:
            fields.append("w_normal")
    outputs = predict(model, [sample], fields=fields)[0]
    path = save_panel(sample, outputs, s["out"])
    _write_resolved("render", s, path.parent)
    print(f"wrote {path}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "sweep": cmd_sweep, "render": cmd_render}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"normfill: error: {exc}", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=settings["threads"]):
            return COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"normfill: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        log.debug("failure", exc_info=True)
        print(f"normfill: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
