"""Command-line driver.

    groupattn <command> [--config FILE] [--flag value ...] --out DIR

Config files are flat ``key = value`` lines; command-line flags override them
and ``GA_SEED`` overrides the seed from either.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("groupattn")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"config field '{field}': {message}")
        self.field = field


MODEL_DEFAULTS = dict(dim=16, layers=2, heads=2, width=5, mode="group", epsilon=2.0, alpha=0.9,
                      kmeans_iters=2, n_max=512)

COMMANDS: dict[str, dict] = {
    "gen-synthetic": dict(kind="classification", t=200, m=1, classes=3, samples=60, seed=0,
                          noise=0.1),
    "pretrain": dict(data="", epochs=20, lr=3e-3, weight_decay=1e-4, mask_rate=0.2, batch_size=16,
                     seed=0, **MODEL_DEFAULTS),
    "finetune": dict(data="", checkpoint="", epochs=20, lr=3e-3, weight_decay=1e-4, batch_size=16,
                     test_frac=0.3, freeze=False, seed=0, **MODEL_DEFAULTS),
    "impute": dict(data="", checkpoint="", mask_rate=0.2, seed=0),
    "forecast": dict(data="", checkpoint="", horizon=10, seed=0),
    "bench": dict(lengths="256,512,1024,2048", groups=32, trials=5, dim=16, layers=2, heads=2,
                  width=5, seed=0),
    "plan-batch": dict(lmax=64, budget=1.0e6, c1=8.0, c2=4.0, c3=16.0, c4=64.0, dim=16,
                       min_points=4, seed=0),
}


def parse_config_file(path) -> dict[str, str]:
    out = {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(field: str, value, default):
    if isinstance(value, str) and not isinstance(default, str):
        try:
            if isinstance(default, bool):
                low = value.lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                return low in ("1", "true", "yes")
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
        except ValueError:
            raise ConfigError(field, f"cannot parse {value!r} as {type(default).__name__}") from None
    return value


def resolve_config(command: str, file_cfg: dict, flags: dict) -> dict:
    defaults = COMMANDS[command]
    cfg = dict(defaults)
    for source in (file_cfg, {k: v for k, v in flags.items() if v is not None}):
        for key, value in source.items():
            if key not in defaults:
                raise ConfigError(key, f"unknown option for '{command}'")
            cfg[key] = _coerce(key, value, defaults[key])
    if "GA_SEED" in os.environ:
        cfg["seed"] = _coerce("seed", os.environ["GA_SEED"], 0)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupattn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, defaults in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None)
        sp.add_argument("--out", default=None)
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(default, bool):
                sp.add_argument(flag, dest=key, action="store_const", const="true", default=None)
            else:
                sp.add_argument(flag, dest=key, default=None)
    return parser


# -- outputs -------------------------------------------------------------

def write_manifest(out: Path, command: str, cfg: dict) -> None:
    manifest = {"command": command, "config": cfg, "versions": {"groupattn": __version__,
                                                               "numpy": np.__version__}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, float):
        return "N/A" if math.isnan(v) else repr(v)
    return v


def write_summary(out: Path, summary: dict) -> None:
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------

def _need_data(cfg):
    from .data import load_dataset

    if not cfg["data"]:
        raise ConfigError("data", "a data directory is required")
    return load_dataset(cfg["data"])


def _model_config(cfg, channels):
    from .model import ModelConfig

    try:
        return ModelConfig(channels=channels, dim=cfg["dim"], layers=cfg["layers"], heads=cfg["heads"],
                           width=cfg["width"], mode=cfg["mode"], epsilon=cfg["epsilon"],
                           alpha=cfg["alpha"], kmeans_iters=cfg["kmeans_iters"], n_max=cfg["n_max"],
                           seed=cfg["seed"])
    except ValueError as exc:
        field = next((k for k in ("mode", "epsilon", "dim", "heads") if k in str(exc)), "model")
        raise ConfigError(field, str(exc)) from None


def _train_config(cfg, **extra):
    from .tasks import TrainConfig

    try:
        return TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                           mask_rate=cfg.get("mask_rate", 0.2), epsilon=cfg["epsilon"],
                           alpha=cfg["alpha"], seed=cfg["seed"], batch_size=cfg["batch_size"], **extra)
    except ValueError as exc:
        field = next((k for k in ("mask_rate", "epsilon") if k in str(exc)), "train")
        raise ConfigError(field, str(exc)) from None


def _load_model(cfg):
    from .model import EncoderStack

    if not cfg["checkpoint"]:
        raise ConfigError("checkpoint", "a checkpoint path is required")
    path = Path(cfg["checkpoint"])
    if path.is_dir():
        path = path / "model.json"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return EncoderStack.load(path)


def cmd_gen_synthetic(cfg, out: Path) -> dict:
    from .data import gen_classification, gen_imputation, save_dataset

    try:
        if cfg["kind"] == "classification":
            ds = gen_classification(cfg["t"], cfg["m"], cfg["classes"], cfg["samples"], cfg["seed"],
                                    noise=cfg["noise"])
        elif cfg["kind"] == "imputation":
            ds = gen_imputation(cfg["t"], cfg["m"], cfg["samples"], cfg["seed"], noise=cfg["noise"])
        else:
            raise ConfigError("kind", f"expected 'classification' or 'imputation', got {cfg['kind']!r}")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("t", str(exc)) from None
    save_dataset(ds, out / "data")
    write_csv(out / "metrics.csv", ["samples", "t", "m", "classes"],
              [[ds.series.shape[0], ds.series.shape[1], ds.series.shape[2], cfg["classes"]]])
    return {"samples": int(ds.series.shape[0]), "data_dir": str(out / "data")}


def cmd_pretrain(cfg, out: Path) -> dict:
    from .embedder import MinMaxScaler
    from .model import EncoderStack
    from .tasks import pretrain

    ds = _need_data(cfg)
    scaler = MinMaxScaler.fit(list(ds.series))
    series = np.stack([scaler.transform(np.nan_to_num(s, nan=np.nanmean(s))) for s in ds.series])
    model = EncoderStack(_model_config(cfg, series.shape[2]), scaler)
    res = pretrain(model, series, _train_config(cfg))
    write_csv(out / "metrics.csv", ["epoch", "loss"], [[i, l] for i, l in enumerate(res.losses)])
    write_csv(out / "schedule.csv", ["epoch", "layer", "n_before", "n_after", "d_threshold", "merged"],
              [[r["epoch"], r["layer"], r["n_before"], r["n_after"], r["d_threshold"], r["merged"]]
               for r in res.schedule])
    model.save(out / "model.json")
    return {"final_loss": res.losses[-1] if res.losses else None, "epochs": len(res.losses),
            "skipped_batches": res.skipped,
            "groups": [s.n_current for s in model.schedulers]}


def cmd_finetune(cfg, out: Path) -> dict:
    from .embedder import MinMaxScaler
    from .model import EncoderStack
    from .tasks import finetune

    ds = _need_data(cfg)
    if ds.labels is None:
        raise ConfigError("data", f"dataset at {cfg['data']} has no labels")
    if cfg["checkpoint"]:
        model = _load_model(cfg)
        scaler = model.scaler
    else:
        scaler = MinMaxScaler.fit(list(ds.series))
        model = EncoderStack(_model_config(cfg, ds.series.shape[2]), scaler)
    series = np.stack([scaler.transform(np.nan_to_num(s)) for s in ds.series])
    rng = np.random.Generator(np.random.Philox(cfg["seed"]))
    order = rng.permutation(series.shape[0])
    n_test = int(round(cfg["test_frac"] * len(order)))
    test, train = order[:n_test], order[n_test:]
    tc = _train_config(cfg, freeze_encoder=cfg["freeze"], schedule=False)
    classes = int(ds.labels.max()) + 1
    res = finetune(model, series[train], ds.labels[train], tc, classes,
                   series[test] if n_test else None, ds.labels[test] if n_test else None)
    write_csv(out / "metrics.csv", ["epoch", "loss"], [[i, l] for i, l in enumerate(res.losses)])
    model.save(out / "model.json")
    return {"accuracy": res.accuracy, "train_size": int(len(train)), "test_size": int(n_test)}


def cmd_impute(cfg, out: Path) -> dict:
    from .embedder import Timeseries, mask_timestamps
    from .tasks import impute

    ds = _need_data(cfg)
    model = _load_model(cfg)
    truth_raw = ds.truth if ds.truth is not None else ds.series
    rows, ours, base = [], [], []
    for i, (raw, clean) in enumerate(zip(ds.series, truth_raw)):
        scaled = model.scaler.transform(np.nan_to_num(raw)) if model.scaler else np.nan_to_num(raw)
        truth = model.scaler.transform(clean) if model.scaler else clean
        masked = mask_timestamps(Timeseries(scaled), cfg["mask_rate"], cfg["seed"] + i)
        res = impute(model, masked, truth)
        mask = masked.masked_positions()
        if mask.any():
            fill = np.where(mask, scaled[~mask.any(axis=1)].mean(axis=0) if (~mask).any() else 0.0, scaled)
            b = float(np.mean((fill[mask] - truth[mask]) ** 2))
            ours.append(res.score)
            base.append(b)
            rows.append([i, int(mask.sum()), res.score, b])
        else:
            rows.append([i, 0, 0.0, 0.0])
    write_csv(out / "metrics.csv", ["sample", "masked", "mse", "mean_baseline_mse"], rows)
    return {"mse": float(np.mean(ours)) if ours else 0.0,
            "mean_baseline_mse": float(np.mean(base)) if base else 0.0}


def cmd_forecast(cfg, out: Path) -> dict:
    from .tasks import forecast

    ds = _need_data(cfg)
    model = _load_model(cfg)
    h = cfg["horizon"]
    rows, errs = [], []
    for i, raw in enumerate(ds.series):
        scaled = model.scaler.transform(np.nan_to_num(raw)) if model.scaler else np.nan_to_num(raw)
        try:
            pred = forecast(model, scaled, h)
        except ValueError as exc:
            raise ConfigError("horizon", str(exc)) from None
        err = float(np.mean((pred - scaled[len(scaled) - h:]) ** 2)) if h else 0.0
        errs.append(err)
        rows.append([i, h, err])
    write_csv(out / "metrics.csv", ["sample", "horizon", "mse"], rows)
    return {"mse": float(np.mean(errs)) if errs else 0.0, "horizon": h}


def cmd_bench(cfg, out: Path) -> dict:
    from .bench import bench_scaling

    try:
        lengths = [int(v) for v in str(cfg["lengths"]).split(",") if v.strip()]
    except ValueError:
        raise ConfigError("lengths", f"expected comma-separated integers, got {cfg['lengths']!r}") from None
    if not lengths or lengths != sorted(lengths):
        raise ConfigError("lengths", "lengths must be a nonempty ascending list")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    if threadpool_limits is not None:
        with threadpool_limits(limits=1):
            res = bench_scaling(lengths, cfg["groups"], cfg["trials"], cfg["dim"], cfg["layers"],
                                cfg["heads"], cfg["width"], cfg["seed"])
    else:
        res = bench_scaling(lengths, cfg["groups"], cfg["trials"], cfg["dim"], cfg["layers"],
                            cfg["heads"], cfg["width"], cfg["seed"])
    (out / "timing.csv").write_text("\n".join(res.csv_lines()) + "\n")
    return {"exp_vanilla": res.exp_vanilla, "exp_group": res.exp_group,
            "speedup_at_max": res.rows[-1].speedup if res.rows else None}


def cmd_plan_batch(cfg, out: Path) -> dict:
    from .planner import MemoryModel, build_plan

    if cfg["lmax"] < 1:
        raise ConfigError("lmax", "must be >= 1")
    if cfg["budget"] <= 0:
        raise ConfigError("budget", "must be positive")
    mm = MemoryModel(cfg["budget"], cfg["c1"], cfg["c2"], cfg["c3"], cfg["c4"], cfg["dim"])
    try:
        plan = build_plan(mm, cfg["lmax"], cfg["min_points"])
    except ValueError as exc:
        raise ConfigError("budget", str(exc)) from None
    plan.save(out / "plan.json")
    write_csv(out / "metrics.csv", ["L", "N", "B"], [[int(L), int(N), int(B)] for L, N, B in plan.samples])
    return {"subplanes": len(plan.partition), "total_error": plan.total_error}


HANDLERS = {
    "gen-synthetic": cmd_gen_synthetic,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "impute": cmd_impute,
    "forecast": cmd_forecast,
    "bench": cmd_bench,
    "plan-batch": cmd_plan_batch,
}


def run(command: str, cfg: dict, out_dir) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, command, cfg)
    summary = HANDLERS[command](cfg, out)
    write_summary(out, {"command": command, **summary})
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)   # unknown command -> SystemExit(2)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out")}
    try:
        file_cfg = parse_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_cfg, flags)
        return run(args.command, cfg, args.out or f"runs/{args.command}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
