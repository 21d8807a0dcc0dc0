"""Probabilistic forecast scores: CRPS, jump CRPS, energy score, reliability."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .neural import DriftSpec


@dataclass
class ForecastEnsemble:
    """Forecast samples ``(M, horizon_len, d)`` with the observations they are scored against."""

    times: np.ndarray
    samples: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim == 2:
            self.samples = self.samples[:, :, None]
        self.observed = np.asarray(self.observed, dtype=float).reshape(self.samples.shape[1:])
        if self.times.shape != (self.samples.shape[1],):
            raise ValueError("times must match the horizon length of samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def n_members(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[2]


def crps(samples, y) -> float:
    """Ensemble CRPS ``mean|x - y| - mean|x - x'| / 2``, O(M log M) via sorting."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    m = x.size
    if m == 0:
        raise ValueError("need at least one sample")
    # sum_{i,j} |x_i - x_j| = 2 sum_k gap_k (k + 1)(m - k - 1); exact zero for a point mass
    k = np.arange(m - 1)
    pair = 2.0 * np.dot(np.diff(x), (k + 1.0) * (m - k - 1.0))
    return float(np.mean(np.abs(x - y)) - pair / (2.0 * m * m))


def crps_table(ens: ForecastEnsemble) -> np.ndarray:
    """Per-(time, dim) CRPS, shape ``(horizon_len, d)``."""
    out = np.empty(ens.observed.shape)
    for i in range(out.shape[0]):
        for k in range(out.shape[1]):
            out[i, k] = crps(ens.samples[:, i, k], ens.observed[i, k])
    return out


@dataclass(frozen=True)
class JumpCRPS:
    """Jump CRPS at one percentile; ``value`` is None when nothing qualifies."""

    percentile: float
    threshold: float
    n_selected: int
    value: Optional[float]

    @property
    def empty(self) -> bool:
        return self.n_selected == 0


def increments(observed: np.ndarray) -> np.ndarray:
    """``|Y_i - Y_{i-1}|`` aligned to index ``i`` (``i >= 1``), shape ``(n - 1, d)``."""
    return np.abs(np.diff(np.asarray(observed, dtype=float), axis=0))


def increment_threshold(ensembles: Sequence[ForecastEnsemble], percentile: float) -> float:
    """Pooled percentile of increment magnitudes over all ensembles (linear interpolation)."""
    if not 0 <= percentile < 100:
        raise ValueError("percentile must lie in [0, 100)")
    pooled = np.concatenate([increments(e.observed).ravel() for e in ensembles])
    if pooled.size == 0:
        raise ValueError("no increments to threshold")
    return float(np.percentile(pooled, percentile))


def jump_crps(ensemble, percentile: float, threshold: Optional[float] = None) -> JumpCRPS:
    """Mean CRPS at indices whose observed increment reaches the percentile threshold.

    ``ensemble`` may be one :class:`ForecastEnsemble` or a list; for a list
    the threshold is pooled over all of them.  An index qualifies when its
    increment is ``>=`` the threshold, so percentile 0 selects every
    increment-bearing index.
    """
    ensembles = [ensemble] if isinstance(ensemble, ForecastEnsemble) else list(ensemble)
    thr = increment_threshold(ensembles, percentile) if threshold is None else float(threshold)
    scores = []
    for e in ensembles:
        inc = increments(e.observed)
        for i, k in zip(*np.nonzero(inc >= thr)):
            scores.append(crps(e.samples[:, i + 1, k], e.observed[i + 1, k]))
    if not scores:
        return JumpCRPS(float(percentile), thr, 0, None)
    return JumpCRPS(float(percentile), thr, len(scores), float(np.mean(scores)))


def energy_score(samples, y) -> float:
    """Energy score of ``samples`` (``(M, d)``) at ``y``; O(M^2 d)."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    m = x.shape[0]
    first = np.linalg.norm(x - y, axis=1).mean()
    diff = x[:, None, :] - x[None, :, :]
    second = np.sqrt((diff * diff).sum(axis=2)).sum() / (2.0 * m * m)
    return float(first - second)


DEFAULT_LEVELS = tuple(np.round(np.arange(0.1, 1.0, 0.1), 10))


@dataclass
class ReliabilityCurve:
    levels: np.ndarray
    coverage: np.ndarray
    n_points: int = 0

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=float)
        self.coverage = np.asarray(self.coverage, dtype=float)
        if np.any(np.diff(self.levels) < 0):
            raise ValueError("levels must be nondecreasing")
        if np.any((self.coverage < 0) | (self.coverage > 1)):
            raise ValueError("coverage must lie in [0, 1]")

    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.coverage - self.levels)))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "coverage"])
            for lv, cv in zip(self.levels, self.coverage):
                w.writerow([_fmt(lv), _fmt(cv)])


def reliability(ensembles, levels=DEFAULT_LEVELS) -> ReliabilityCurve:
    """Coverage of central empirical-quantile intervals, pooled over all (time, dim) points.

    Interval endpoints are inclusive.
    """
    ensembles = [ensembles] if isinstance(ensembles, ForecastEnsemble) else list(ensembles)
    levels = np.asarray(levels, dtype=float)
    hits = np.zeros(levels.size)
    n = 0
    for e in ensembles:
        lo = np.quantile(e.samples, (1.0 - levels) / 2.0, axis=0)  # (L, h, d)
        hi = np.quantile(e.samples, (1.0 + levels) / 2.0, axis=0)
        inside = (e.observed >= lo) & (e.observed <= hi)
        hits += inside.reshape(levels.size, -1).sum(axis=1)
        n += e.observed.size
    return ReliabilityCurve(levels, hits / n if n else np.zeros(levels.size), n)


def param_recovery(learned: DriftSpec, truth: DriftSpec) -> dict:
    """Absolute error per named drift parameter."""
    if learned.kind != truth.kind:
        raise ValueError(f"drift variants differ: {learned.kind} vs {truth.kind}")
    est, ref = learned.named_values(), truth.named_values()
    if est.keys() != ref.keys():
        raise ValueError("drift parameter shapes differ")
    return {k: abs(est[k] - ref[k]) for k in ref}


def mean_recovery_error(learned: DriftSpec, truth: DriftSpec, names: Optional[Sequence[str]] = None) -> float:
    err = param_recovery(learned, truth)
    keys = list(names) if names else list(err)
    return float(np.mean([err[k] for k in keys]))


# ---------------------------------------------------------------------------
# serialisation


def _fmt(v) -> str:
    return "" if v is None else format(float(v), ".17g")


METRIC_FIELDS = ("window_id", "metric", "threshold", "value")


@dataclass
class MetricRow:
    window_id: str
    metric: str
    threshold: Optional[float]
    value: Optional[float]


def write_metrics(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r.window_id, r.metric, _fmt(r.threshold), _fmt(r.value)])


def read_metrics(path) -> list:
    out = []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            out.append(MetricRow(row["window_id"], row["metric"],
                                 float(row["threshold"]) if row["threshold"] else None,
                                 float(row["value"]) if row["value"] else None))
    return out


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def score_windows(ensembles: dict, percentiles=(90.0, 95.0, 97.5, 99.0), levels=DEFAULT_LEVELS,
                  energy: Optional[bool] = None) -> tuple:
    """Score a ``{window_id: ForecastEnsemble}`` mapping.

    Returns ``(rows, summary, curve)``.  Jump-CRPS thresholds are pooled over
    all windows; windows where nothing qualifies contribute no row and are
    counted in the summary.
    """
    ids = list(ensembles)
    ens = [ensembles[w] for w in ids]
    if energy is None:
        energy = bool(ens) and ens[0].dim > 1
    rows = []
    crps_all, energy_all = [], []
    for wid, e in zip(ids, ens):
        c = float(crps_table(e).mean())
        crps_all.append(c)
        rows.append(MetricRow(wid, "crps", None, c))
        if energy:
            es = float(np.mean([energy_score(e.samples[:, i, :], e.observed[i]) for i in range(e.times.size)]))
            energy_all.append(es)
            rows.append(MetricRow(wid, "energy", None, es))
    jump = {}
    for p in percentiles:
        thr = increment_threshold(ens, p)
        pooled = jump_crps(ens, p, thr)
        empty = 0
        for wid, e in zip(ids, ens):
            jc = jump_crps(e, p, thr)
            if jc.empty:
                empty += 1
            else:
                rows.append(MetricRow(wid, f"jump_crps_p{p:g}", thr, jc.value))
        jump[f"p{p:g}"] = {"threshold": thr, "value": pooled.value, "n_selected": pooled.n_selected,
                           "windows_without_qualifying_increments": empty}
    curve = reliability(ens, levels)
    summary = {
        "n_windows": len(ids),
        "crps_mean": float(np.mean(crps_all)) if crps_all else None,
        "energy_mean": float(np.mean(energy_all)) if energy_all else None,
        "jump_crps": jump,
        "jump_threshold_pooling": "global",
        "reliability": {"levels": curve.levels.tolist(), "coverage": curve.coverage.tolist()},
    }
    return rows, summary, curve
