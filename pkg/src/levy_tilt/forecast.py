"""Forecasting with the learned prior from posterior boundary samples."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .baseline import gaussian_prior_paths
from .evaluation import ForecastEnsemble
from .neural import ModelParams
from .rng import Purpose, stream
from .stable import StableSpec, simulate_prior_batch


def start_states(boundary, m_paths: int) -> np.ndarray:
    """Cycle through the boundary samples; the means agree when ``m_paths`` is a multiple of their count."""
    b = np.atleast_2d(np.asarray(boundary, dtype=float))
    if b.shape[0] == 0:
        raise ValueError("need at least one boundary sample")
    return b[np.arange(m_paths) % b.shape[0]]


def forecast_grid(t0: float, horizon: float, dt: float) -> np.ndarray:
    n = max(1, int(math.ceil(horizon / dt - 1e-9)))
    return t0 + np.linspace(0.0, horizon, n + 1)


def _nodes(grid, times) -> np.ndarray:
    idx = np.searchsorted(grid, times)
    idx = np.clip(idx, 1, grid.size - 1)
    return np.where(np.abs(grid[idx - 1] - times) <= np.abs(grid[idx] - times), idx - 1, idx)


def forecast(params: ModelParams, spec: Optional[StableSpec], boundary, horizon: float, m_paths: int,
             seed: int = 0, obs_times=None, observed=None, sigma_eps: Optional[float] = None,
             dt: Optional[float] = None, count_sampler=None) -> ForecastEnsemble:
    """Ensemble forecast from the learned prior SDE, started at the window boundary.

    The tilted model forecasts with the compound-Poisson prior (``spec``
    given); a Gaussian-baseline checkpoint (``spec=None``) uses its learned
    Brownian prior.  Without ``obs_times`` the ensemble covers the whole
    simulation grid, starting at the boundary.  With ``obs_times`` it is read
    off at the nearest grid nodes and, if ``sigma_eps`` is set, observation
    noise is added so members are draws of the observed series.
    """
    cfg = params.config
    t0 = cfg.horizon
    dt = dt if dt is not None else params.constants.get("dt", cfg.horizon / 1000.0)
    grid = forecast_grid(t0, horizon, dt)
    x0 = start_states(boundary, m_paths)
    if spec is None:
        paths = gaussian_prior_paths(params, grid, x0, seed)
    else:
        paths = simulate_prior_batch(params.drift_numpy, spec, grid, x0, seed, batch=1,
                                     count_sampler=count_sampler)
    samples = np.transpose(paths, (1, 0, 2))  # (m, n, d)
    if obs_times is None:
        times = grid
    else:
        times = np.asarray(obs_times, dtype=float)
        if np.any(times < t0 - 1e-12) or np.any(times > grid[-1] + 1e-9):
            raise ValueError("forecast times must lie within the horizon")
        samples = samples[:, _nodes(grid, times)]
        if sigma_eps:
            noise = stream(seed, Purpose.FORECAST, 2).standard_normal(samples.shape)
            samples = samples + np.asarray(sigma_eps, dtype=float) * noise
    if observed is None:
        observed = np.full(samples.shape[1:], np.nan)
    return ForecastEnsemble(times, samples, observed)


def write_ensemble(ens: ForecastEnsemble, path) -> None:
    """CSV with columns ``t, sample_id, dim_0..``."""
    m, n, d = ens.samples.shape
    with open(path, "w") as fh:
        fh.write(",".join(["t", "sample_id"] + [f"dim_{k}" for k in range(d)]) + "\n")
        for i in range(n):
            t = format(ens.times[i], ".17g")
            for s in range(m):
                fh.write(",".join([t, str(s)] + [format(v, ".17g") for v in ens.samples[s, i]]) + "\n")


def read_ensemble(path, observed=None) -> ForecastEnsemble:
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    times = np.unique(raw[:, 0])
    m = int(raw[:, 1].max()) + 1
    d = raw.shape[1] - 2
    samples = np.empty((m, times.size, d))
    ti = np.searchsorted(times, raw[:, 0])
    samples[raw[:, 1].astype(int), ti] = raw[:, 2:]
    if observed is None:
        observed = np.full((times.size, d), np.nan)
    return ForecastEnsemble(times, samples, observed)
