"""``levy-tilt`` command line: generate, train, forecast, evaluate, compare."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .baseline import gaussian_baseline_train
from .data import (DataError, GenerateConfig, Series, generate_dataset, read_series, rolling_windows,
                   window_data)
from .evaluation import ForecastEnsemble, read_metrics, score_windows, write_metrics, write_summary
from .forecast import forecast, read_ensemble, write_ensemble
from .neural import ModelParams
from .stable import StableSpec, matched_sigma_g
from .training import DivergenceError, TrainConfig, train, write_diagnostics, write_trace

log = logging.getLogger("levy_tilt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
COMMANDS = ("generate", "train", "forecast", "evaluate", "compare")
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str
    dataset: Optional[str] = None
    alpha: float = 1.5
    tau: float = 0.01
    sigma_g: Optional[float] = 1.0
    drift: str = "ou"
    model: str = "tilted"
    model_overrides: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    train_span: Optional[float] = None
    horizon_span: Optional[float] = None
    stride: Optional[float] = None
    windows: Optional[list] = None
    sigma_eps: float = 0.1
    forecast_paths: int = 500
    percentiles: list = field(default_factory=lambda: [90.0, 95.0, 97.5, 99.0])
    levels: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    runs: dict = field(default_factory=dict)
    generate: dict = field(default_factory=dict)
    out: str = "out"
    seed: int = 0
    base_dir: Path = Path(".")

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def spec(self) -> StableSpec:
        sg = matched_sigma_g(self.alpha) if self.sigma_g is None else self.sigma_g
        return StableSpec(self.alpha, self.tau, sg)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        unknown = set(self.train) - names
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        return TrainConfig(**{**self.train, "seed": self.seed})


def load_config(mode: str, path, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{path}: config must be an object with \"version\": {CONFIG_VERSION}")
    doc = {k: v for k, v in doc.items() if k != "version"}
    known = {f.name for f in fields(RunConfig)} - {"mode", "base_dir"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{path}: unknown fields {sorted(unknown)}")
    cfg = RunConfig(mode=mode, base_dir=path.parent, **doc)
    if seed is not None:
        cfg.seed = seed
    cfg.out = str(Path(out).resolve()) if out is not None else str(cfg.path(cfg.out).resolve())
    for name in ("train_span", "horizon_span", "stride"):
        v = getattr(cfg, name)
        if v is not None and not v > 0:
            raise ConfigError(f"{name} must be positive")
    if cfg.model not in ("tilted", "gaussian"):
        raise ConfigError("model must be 'tilted' or 'gaussian'")
    try:
        cfg.spec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _guard(paths, force: bool) -> None:
    for p in paths:
        if p.exists() and not force:
            raise FileExistsError(f"{p} exists; pass --force to overwrite")


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _windows(cfg: RunConfig):
    if not cfg.dataset:
        raise ConfigError("dataset is required")
    series = read_series(cfg.path(cfg.dataset))
    if cfg.train_span is None or cfg.horizon_span is None:
        raise ConfigError("train_span and horizon_span are required")
    split = rolling_windows(series, cfg.train_span, cfg.horizon_span, cfg.stride)
    if not split.windows:
        raise DataError(f"no evaluation windows: {split.reason}")
    wins = split.windows
    if cfg.windows is not None:
        wanted = set(cfg.windows)
        wins = [w for i, w in enumerate(wins) if i in wanted or w.window_id in wanted]
        if not wins:
            raise ConfigError("window selection is empty")
    return series, wins


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, force: bool) -> int:
    names = {f.name for f in fields(GenerateConfig)}
    unknown = set(cfg.generate) - names
    if unknown:
        raise ConfigError(f"unknown generate fields: {sorted(unknown)}")
    opts = {"alphas": (cfg.alpha,), "tau": cfg.tau, "sigma_eps": cfg.sigma_eps, "drift": cfg.drift,
            "sigma_g": cfg.sigma_g, **cfg.generate, "seed": cfg.seed}
    opts["alphas"] = tuple(opts["alphas"])
    manifest = generate_dataset(GenerateConfig(**opts), _out_dir(cfg), force=force)
    log.info("wrote %d realisations", len(manifest["realisations"]))
    return EXIT_OK


def cmd_train(cfg: RunConfig, force: bool) -> int:
    series, wins = _windows(cfg)
    tcfg = cfg.train_config()
    out = _out_dir(cfg)
    for w in wins:
        wdir = out / w.window_id
        targets = [wdir / n for n in ("checkpoint.json", "trace.csv", "boundary.csv", "meta.json")]
        _guard(targets, force)
    status = EXIT_OK
    for w in wins:
        wd = window_data(series, w, cfg.train_span, cfg.horizon_span, cfg.sigma_eps)
        wdir = out / w.window_id
        wdir.mkdir(exist_ok=True)
        try:
            if cfg.model == "tilted":
                res = train(wd.obs, cfg.spec(), tcfg, cfg.drift, horizon=wd.train_span,
                            model_overrides=cfg.model_overrides)
            else:
                res = gaussian_baseline_train(wd.obs, tcfg, cfg.drift, horizon=wd.train_span,
                                              model_overrides=cfg.model_overrides)
        except DivergenceError as exc:
            log.error("window %s diverged: %s", w.window_id, exc)
            write_trace(exc.trace or [], wdir / "trace.csv")
            status = EXIT_DIVERGENCE
            continue
        res.params.save(wdir / "checkpoint.json")
        write_trace(res.trace, wdir / "trace.csv")
        if cfg.model == "tilted":
            write_diagnostics(res.trace, wdir / "diagnostics.csv")
        np.savetxt(wdir / "boundary.csv", res.boundary, delimiter=",", fmt="%.17g")
        _dump({**wd.meta, "model": cfg.model, "drift": res.params.drift_spec().to_json(),
               "final_elbo": res.final_elbo, "train_span": wd.train_span, "horizon_span": wd.horizon_span,
               "stable": None if cfg.model == "gaussian" else
               {"alpha": res.spec.alpha, "tau": res.spec.tau, "sigma_g": res.spec.sigma_g}},
              wdir / "meta.json")
    return status


def cmd_forecast(cfg: RunConfig, force: bool) -> int:
    series, wins = _windows(cfg)
    out = _out_dir(cfg)
    _guard([out / w.window_id / "ensemble.csv" for w in wins], force)
    for w in wins:
        wdir = out / w.window_id
        if not (wdir / "checkpoint.json").exists():
            raise DataError(f"{wdir}: no checkpoint; run train first")
        params = ModelParams.load(wdir / "checkpoint.json")
        meta = json.loads((wdir / "meta.json").read_text())
        boundary = np.loadtxt(wdir / "boundary.csv", delimiter=",", ndmin=2).reshape(-1, params.config.dim)
        wd = window_data(series, w, cfg.train_span, cfg.horizon_span, cfg.sigma_eps)
        spec = None if meta["model"] == "gaussian" else StableSpec(**meta["stable"])
        sig = params.sigma_eps() if params.config.learn_sigma_eps else cfg.sigma_eps
        ens = forecast(params, spec, boundary, wd.horizon_span, cfg.forecast_paths, seed=cfg.seed,
                       obs_times=wd.horizon_times, observed=wd.horizon_values, sigma_eps=sig)
        write_ensemble(ens, wdir / "ensemble.csv")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, force: bool) -> int:
    series, wins = _windows(cfg)
    out = _out_dir(cfg)
    _guard([out / "metrics.csv", out / "summary.json", out / "reliability.csv"], force)
    ensembles = {}
    for w in wins:
        path = out / w.window_id / "ensemble.csv"
        if not path.exists():
            raise DataError(f"{path}: missing forecast")
        wd = window_data(series, w, cfg.train_span, cfg.horizon_span, cfg.sigma_eps)
        ens = read_ensemble(path)
        if ens.times.shape != wd.horizon_times.shape or not np.allclose(ens.times, wd.horizon_times,
                                                                        rtol=0, atol=1e-9):
            raise DataError(f"{path}: forecast times do not align with window {w.window_id}")
        if ens.dim != series.dim:
            raise DataError(f"{path}: forecast dimension {ens.dim} != series dimension {series.dim}")
        ensembles[w.window_id] = ForecastEnsemble(ens.times, ens.samples, wd.horizon_values)
    rows, summary, curve = score_windows(ensembles, cfg.percentiles, cfg.levels)
    summary["time_assumption"] = "rows equally spaced in index time"
    write_metrics(rows, out / "metrics.csv")
    write_summary(summary, out / "summary.json")
    curve.to_csv(out / "reliability.csv")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, force: bool) -> int:
    if not cfg.runs:
        raise ConfigError("compare needs a 'runs' mapping of name -> run directory")
    out = _out_dir(cfg)
    _guard([out / "compare.csv"], force)
    table = {}
    for name, rdir in sorted(cfg.runs.items()):
        path = cfg.path(rdir) / "metrics.csv"
        if not path.exists():
            raise DataError(f"{path}: missing metrics; run evaluate first")
        for r in read_metrics(path):
            if r.value is not None:
                table.setdefault(r.metric, {}).setdefault(name, []).append(r.value)
    with (out / "compare.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "rank", "run", "value", "n_windows"])
        for metric in sorted(table):
            means = sorted(((float(np.mean(v)), name, len(v)) for name, v in table[metric].items()))
            for rank, (val, name, n) in enumerate(means, start=1):
                w.writerow([metric, rank, name, format(val, ".17g"), n])
    return EXIT_OK


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "forecast": cmd_forecast,
            "evaluate": cmd_evaluate, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="levy-tilt", description="Variational inference for Levy-driven SDEs.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("LEVY_TILT_THREADS")
    if threads:
        import torch
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg = load_config(args.command, args.config, args.seed, args.out)
        return HANDLERS[args.command](cfg, args.force)
    except (ConfigError, FileExistsError) as exc:
        print(f"levy-tilt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"levy-tilt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as exc:
        print(f"levy-tilt: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
