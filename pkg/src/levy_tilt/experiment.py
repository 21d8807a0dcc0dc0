"""Synthetic train-and-forecast protocol comparing the tilted model with the Gaussian baseline."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .baseline import gaussian_baseline_train
from .data import GenerateConfig, Realisation, Series, make_realisation, rolling_windows, window_data
from .evaluation import crps_table, jump_crps, mean_recovery_error
from .forecast import forecast
from .stable import StableSpec
from .training import TrainConfig, train


@dataclass
class Protocol:
    """Desk-scale settings for one realisation; both models share the optimiser protocol."""

    train_span: float = 5.0
    horizon_span: float = 1.0
    m_paths: int = 64
    n_steps: int = 250
    k_samples: int = 250
    iterations: int = 600
    learning_rate: float = 1e-3
    l2_scale: float = 1e-4
    forecast_paths: int = 1000
    seed: int = 0
    model: dict = field(default_factory=lambda: {"embed_dim": 16, "head_width": 32, "head_depth": 2, "n_ref": 20})
    percentiles: tuple = (90.0, 95.0, 97.5, 99.0)
    on_divergence: str = "stop"

    def train_config(self) -> TrainConfig:
        return TrainConfig(m_paths=self.m_paths, n_steps=self.n_steps, k_samples=self.k_samples,
                           iterations=self.iterations, learning_rate=self.learning_rate,
                           l2_scale=self.l2_scale, seed=self.seed, on_divergence=self.on_divergence)


@dataclass
class ModelOutcome:
    crps: float
    jump_crps: dict
    recovery: float
    final_elbo: float
    seconds: float
    drift: dict
    halted_at: Optional[int] = None
    result: object = None


def run_realisation(rz: Realisation, protocol: Protocol, spec: Optional[StableSpec] = None,
                    sigma_eps: float = 0.1, keep_results: bool = False) -> dict:
    """Train both models on the first window of ``rz`` and score held-out forecasts."""
    series = Series(rz.obs_times, rz.obs_values, [f"x_{k}" for k in range(rz.obs_values.shape[1])])
    split = rolling_windows(series, protocol.train_span, protocol.horizon_span)
    if not split.windows:
        raise ValueError(split.reason)
    wd = window_data(series, split[0], protocol.train_span, protocol.horizon_span, sigma_eps)
    spec = spec or rz.spec
    cfg = protocol.train_config()
    kind = rz.drift.kind
    out = {}
    for name in ("tilted", "gaussian"):
        t0 = time.perf_counter()
        if name == "tilted":
            res = train(wd.obs, spec, cfg, kind, horizon=wd.train_span, model_overrides=protocol.model)
            fspec = spec
        else:
            res = gaussian_baseline_train(wd.obs, cfg, kind, horizon=wd.train_span, model_overrides=protocol.model)
            fspec = None
        ens = forecast(res.params, fspec, res.boundary, wd.horizon_span, protocol.forecast_paths,
                       seed=protocol.seed, obs_times=wd.horizon_times, observed=wd.horizon_values,
                       sigma_eps=sigma_eps)
        learned = res.params.drift_spec()
        jumps = {p: jump_crps(ens, p).value for p in protocol.percentiles}
        out[name] = ModelOutcome(float(crps_table(ens).mean()), jumps, mean_recovery_error(learned, rz.drift),
                                 res.final_elbo, time.perf_counter() - t0, learned.named_values(),
                                 res.halted_at, res if keep_results else None)
    return out


def run_study(alpha: float, realisations: int, protocol: Protocol, gen: Optional[GenerateConfig] = None,
              callback=None) -> list:
    """Run :func:`run_realisation` on ``realisations`` OU datasets at one alpha."""
    gen = gen or GenerateConfig(alphas=(alpha,), realisations=realisations,
                                horizon=protocol.train_span + protocol.horizon_span)
    rows = []
    for i in range(realisations):
        rz = make_realisation(gen, alpha, i)
        res = run_realisation(rz, protocol, sigma_eps=gen.sigma_eps)
        rows.append({"index": i, "truth": rz.drift.named_values(), **res})
        if callback:
            callback(i, rows[-1])
    return rows
