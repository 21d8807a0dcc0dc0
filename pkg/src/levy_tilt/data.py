"""Series CSV ingestion, rolling windows and synthetic dataset generation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from .neural import DriftSpec
from .rng import Purpose, stream
from .stable import GroundTruthConfig, LatentPath, StableSpec, simulate_ground_truth
from .training import Observations

SECONDS_PER_DAY = 86400.0
TIME_COLUMNS = ("timestamp", "t")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


@dataclass
class Series:
    """A multivariate series.

    ``times`` are days since the first row for ``timestamp`` columns (ISO-8601
    or epoch seconds) and raw model time for a ``t`` column.
    """

    times: np.ndarray
    values: np.ndarray
    names: list
    time_column: str = "t"
    stamps: Optional[list] = None

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _parse_stamp(raw: str) -> float:
    """Epoch seconds from an ISO-8601 string or a number."""
    try:
        return float(raw)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(raw.strip().replace("Z", "+00:00"))
    except ValueError as exc:
        raise DataError(f"unparseable timestamp {raw!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def read_series(path) -> Series:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if len(header) < 2 or header[0] not in TIME_COLUMNS:
        raise DataError(f"{path}: header must start with one of {TIME_COLUMNS} followed by value columns")
    if len(body) < 2:
        raise DataError(f"{path}: need at least 2 rows")
    times, values = [], []
    for i, row in enumerate(body, start=2):
        if len(row) != len(header) or any(c.strip() == "" for c in row):
            raise DataError(f"{path}:{i}: missing cells")
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise DataError(f"{path}:{i}: non-numeric value") from exc
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"{path}:{i}: NaN or infinite value")
        times.append(float(row[0]) if header[0] == "t" else _parse_stamp(row[0]))
        values.append(vals)
    t = np.asarray(times)
    if not np.all(np.isfinite(t)):
        raise DataError(f"{path}: non-finite time")
    if np.any(np.diff(t) <= 0):
        bad = int(np.flatnonzero(np.diff(t) <= 0)[0]) + 3
        raise DataError(f"{path}:{bad}: timestamps not strictly increasing")
    stamps = None
    if header[0] == "timestamp":
        stamps = [r[0] for r in body]
        t = (t - t[0]) / SECONDS_PER_DAY
    return Series(t, np.asarray(values), header[1:], header[0], stamps)


def write_series(path, times, values, names=None, time_column: str = "t", stamps=None) -> None:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    names = list(names) if names else [f"x_{k}" for k in range(values.shape[1])]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([time_column] + names)
        for i in range(values.shape[0]):
            t = stamps[i] if stamps is not None else _fmt(times[i])
            w.writerow([t] + [_fmt(v) for v in values[i]])


# ---------------------------------------------------------------------------
# rolling windows


@dataclass(frozen=True)
class Window:
    window_id: str
    train: slice
    horizon: slice
    start: float


@dataclass
class WindowSplit:
    windows: list
    reason: str = ""

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    def __getitem__(self, i):
        return self.windows[i]


def series_span(times) -> float:
    """Covered span: first to last time plus one median spacing."""
    t = np.asarray(times, dtype=float)
    return float(t[-1] - t[0] + np.median(np.diff(t)))


def rolling_windows(series, train_span: float, horizon_span: float, stride: Optional[float] = None) -> WindowSplit:
    """Consecutive windows of ``train_span`` followed by ``horizon_span``.

    ``series`` is a :class:`Series` or an array of times.  The stride defaults
    to ``horizon_span`` so evaluation horizons never overlap.  Window ``w``
    trains on times in ``[s, s + train_span)`` and evaluates on
    ``[s + train_span, s + train_span + horizon_span)`` with
    ``s = t0 + w * stride``.
    """
    if not (train_span > 0 and horizon_span > 0):
        raise ValueError("spans must be positive")
    stride = horizon_span if stride is None else stride
    if not stride > 0:
        raise ValueError("stride must be positive")
    t = np.asarray(series.times if isinstance(series, Series) else series, dtype=float)
    span = series_span(t)
    need = train_span + horizon_span
    tol = 1e-9 * max(1.0, span)
    if span + tol < need:
        return WindowSplit([], f"series spans {span:g} but one window needs {need:g}")
    count = int(math.floor((span - need) / stride + 1e-9)) + 1
    out = []
    for w in range(count):
        s = t[0] + w * stride
        a = int(np.searchsorted(t, s - tol))
        b = int(np.searchsorted(t, s + train_span - tol))
        c = int(np.searchsorted(t, s + need - tol))
        if b - a < 2 or c - b < 1:
            continue
        out.append(Window(f"w{w:04d}", slice(a, b), slice(b, c), float(s)))
    reason = "" if out else "no window contains enough rows"
    return WindowSplit(out, reason)


@dataclass
class WindowData:
    """One window in model time: training observations and held-out targets."""

    obs: Observations
    horizon_times: np.ndarray
    horizon_values: np.ndarray
    train_span: float
    horizon_span: float
    meta: dict = field(default_factory=dict)


def window_data(series: Series, window: Window, train_span: float, horizon_span: float,
                sigma_eps: float = 0.1) -> WindowData:
    """Rescale a window to model time ``[0, T]`` with ``T = train_span``.

    Rows are treated as equally spaced in index time: row ``i`` of the window
    sits at ``i * train_span / n_train_rows``.
    """
    n_train = window.train.stop - window.train.start
    step = train_span / n_train
    n_h = window.horizon.stop - window.horizon.start
    obs = Observations(np.arange(n_train) * step, series.values[window.train].copy(), sigma_eps)
    ht = train_span + np.arange(n_h) * step
    meta = {"window_id": window.window_id, "index_time_step": step, "n_train_rows": n_train,
            "n_horizon_rows": n_h, "time_assumption": "rows equally spaced in index time"}
    return WindowData(obs, ht, series.values[window.horizon].copy(), train_span, max(horizon_span, n_h * step), meta)


# ---------------------------------------------------------------------------
# synthetic datasets


@dataclass
class GenerateConfig:
    alphas: tuple = (1.2,)
    realisations: int = 1
    drift: str = "ou"
    horizon: float = 6.0
    steps_per_unit: int = 100
    obs_every: int = 5
    sigma_eps: float = 0.1
    tau: float = 0.01
    sigma_g: Optional[float] = None
    seed: int = 0
    theta_range: tuple = (0.5, 2.5)
    mu_range: tuple = (-1.0, 1.0)
    well_range: tuple = (0.5, 1.5)


def draw_drift(kind: str, cfg: GenerateConfig, seed: int, index: int) -> DriftSpec:
    g = stream(seed, Purpose.MISC, index)
    if kind == "ou":
        return DriftSpec.ou([g.uniform(*cfg.theta_range)], [g.uniform(*cfg.mu_range)])
    if kind == "double_well":
        return DriftSpec.double_well([g.uniform(*cfg.well_range)], [g.uniform(*cfg.well_range)])
    raise ValueError(f"cannot draw parameters for drift {kind!r}")


def initial_state(drift: DriftSpec) -> np.ndarray:
    if drift.kind == "ou":
        return np.asarray(drift.params["mu"], dtype=float).copy()
    if drift.kind == "double_well":
        p = drift.params
        return np.sqrt(np.asarray(p["theta1"], dtype=float) / np.asarray(p["theta2"], dtype=float))
    return np.zeros(1)


@dataclass
class Realisation:
    index: int
    alpha: float
    drift: DriftSpec
    latent: LatentPath
    obs_times: np.ndarray
    obs_values: np.ndarray
    spec: StableSpec
    seed: int


def make_realisation(cfg: GenerateConfig, alpha: float, index: int, spec: Optional[StableSpec] = None) -> Realisation:
    """One ground-truth path with noisy observations on every ``obs_every``-th grid node."""
    from .stable import matched_sigma_g

    if spec is None:
        sg = cfg.sigma_g if cfg.sigma_g is not None else matched_sigma_g(alpha)
        spec = StableSpec(alpha, cfg.tau, sg)
    drift = draw_drift(cfg.drift, cfg, cfg.seed, index)
    n_steps = int(round(cfg.horizon * cfg.steps_per_unit))
    gt = simulate_ground_truth(GroundTruthConfig(spec, drift, cfg.horizon, n_steps, initial_state(drift),
                                                 seed=cfg.seed, replicate=index))
    nodes = np.arange(0, n_steps, cfg.obs_every)
    noise = stream(cfg.seed, Purpose.OBS_NOISE, index).standard_normal((nodes.size, gt.states.shape[1]))
    values = gt.states[nodes] + cfg.sigma_eps * noise
    return Realisation(index, alpha, drift, gt, gt.times[nodes], values, spec, cfg.seed)


def generate_dataset(cfg: GenerateConfig, out_dir, force: bool = False) -> dict:
    """Write one CSV per realisation plus latent truth and a manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; pass --force to overwrite")
    entries = []
    index = 0
    for alpha in cfg.alphas:
        for _ in range(cfg.realisations):
            rz = make_realisation(cfg, alpha, index)
            stem = f"a{alpha:g}_r{index:03d}"
            data_file, latent_file = f"{stem}.csv", f"{stem}_latent.csv"
            if not force and (out / data_file).exists():
                raise FileExistsError(f"{out / data_file} exists; pass --force to overwrite")
            names = [f"x_{k}" for k in range(rz.obs_values.shape[1])]
            write_series(out / data_file, rz.obs_times, rz.obs_values, names)
            rz.latent.to_csv(out / latent_file)
            entries.append({"index": index, "alpha": alpha, "data": data_file, "latent": latent_file,
                            "jumps": f"{stem}_latent_jumps.csv", "drift": rz.drift.to_json(),
                            "stable": {"alpha": rz.spec.alpha, "tau": rz.spec.tau, "sigma_g": rz.spec.sigma_g},
                            "sigma_eps": cfg.sigma_eps, "seed": cfg.seed, "replicate": index})
            index += 1
    manifest = {"version": 1, "generator": {k: (list(v) if isinstance(v, tuple) else v)
                                            for k, v in cfg.__dict__.items()},
                "realisations": entries}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("version") != 1:
        raise DataError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    for e in doc["realisations"]:
        e["drift"] = DriftSpec.from_json(e["drift"])
    return doc
