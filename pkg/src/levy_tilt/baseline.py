"""Gaussian-SDE baseline with the same drift family.

Prior ``dX = f(X) dt + sigma dW`` with a learnable constant ``sigma``; the
variational posterior adds a time-dependent drift correction ``u(t)`` from the
same encoder-plus-MLP architecture, so the path KL is ``1/2 int u^2 / sigma^2 dt``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .neural import ModelParams, backward, init_params
from .rng import Purpose, stream
from .training import (data_drift_init, DivergenceError, ElboResult, ElboTerms, Observations, OptimizerState, TrainConfig,
                       TrainResult, _initial_state, _loglik_paths, latent_grid, model_config_for, rescale_flat,
                       rmsprop_step, snap_to_grid)


@dataclass
class GaussianBatch:
    times: np.ndarray
    x0: np.ndarray
    z: np.ndarray  # (n_steps, m, d) standard normals
    seed: int
    batch: int


def draw_noise(grid, x0, m_paths: int, seed: int, batch: int) -> GaussianBatch:
    d = np.atleast_1d(x0).size
    z = stream(seed, Purpose.NORMAL, batch).standard_normal((len(grid) - 1, m_paths, d))
    return GaussianBatch(np.asarray(grid, dtype=float), np.atleast_1d(np.asarray(x0, dtype=float)), z, seed, batch)


def quadratic_kl(u: torch.Tensor, sigma: torch.Tensor, dts: torch.Tensor) -> torch.Tensor:
    """``1/2 sum_j dt_j sum_d u_jd^2 / sigma_d^2`` for a time-only correction."""
    return 0.5 * ((u / sigma) ** 2).sum(dim=1).mul(dts).sum()


def replay_gaussian(params: ModelParams, flat: torch.Tensor, gb: GaussianBatch,
                    obs: Optional[Observations], l2_scale: float) -> ElboTerms:
    net = params.bind(flat)
    grid = gb.times
    dts = torch.from_numpy(np.diff(grid))
    u = net.correction(torch.from_numpy(grid[:-1]))
    sigma = net.sigma()
    z = torch.from_numpy(gb.z)
    m = gb.z.shape[1]
    x = torch.from_numpy(np.broadcast_to(gb.x0, (m, gb.x0.size)).copy())
    xs = [x]
    for u_j, z_j, dt in zip(u.unbind(0), z.unbind(0), np.diff(grid)):
        x = x + (net.drift(x) + u_j) * float(dt) + sigma * math.sqrt(dt) * z_j
        xs.append(x)
    states = torch.stack(xs)
    kl = quadratic_kl(u, sigma, dts)
    if obs is not None and obs.n:
        loglik = _loglik_paths(states, snap_to_grid(obs.times, grid), obs, net.sigma_eps()).mean()
    else:
        loglik = torch.zeros((), dtype=torch.float64)
    l2 = l2_scale * net.l2()
    return ElboTerms(loglik - kl - l2, loglik, kl, l2, states)


def gaussian_elbo(params: ModelParams, obs: Optional[Observations], cfg: TrainConfig, x0=None,
                  batch: int = 0, grid=None) -> ElboResult:
    grid = latent_grid(obs, params.config.horizon, cfg.n_steps) if grid is None else np.asarray(grid)
    x0 = _initial_state(obs, params, x0)
    gb = draw_noise(grid, x0, cfg.m_paths, cfg.seed, batch)
    flat = torch.from_numpy(params.values.copy()).requires_grad_(True)
    terms = replay_gaussian(params, flat, gb, obs, cfg.l2_scale)
    if not torch.isfinite(terms.elbo):
        raise DivergenceError(f"non-finite ELBO at batch {batch}")
    grad = backward(terms.elbo, flat, params)
    return ElboResult(float(terms.elbo.detach()), grad, float(terms.loglik.detach()), float(terms.kl.detach()),
                      float(terms.l2.detach()), gb)


def gaussian_baseline_train(obs: Observations, cfg: TrainConfig, drift_variant: str = "ou",
                            horizon: Optional[float] = None, model_overrides: Optional[dict] = None,
                            drift_init: Optional[dict] = None, callback=None) -> TrainResult:
    horizon = float(obs.times[-1]) if horizon is None else float(horizon)
    params = init_params(model_config_for(obs, "gaussian", drift_variant, horizon, **(model_overrides or {})),
                         cfg.seed, data_drift_init(obs, drift_variant) if drift_init is None else drift_init)
    state = OptimizerState.zeros(params.size, cfg.rho, cfg.eps_opt)
    grid = latent_grid(obs, horizon, cfg.n_steps)
    x0 = _initial_state(obs, params, None)
    trace = []
    halted = None
    for it in range(cfg.iterations):
        try:
            res = gaussian_elbo(params, obs, cfg, x0=x0, batch=it, grid=grid)
        except FloatingPointError as exc:
            if cfg.on_divergence == "raise":
                raise DivergenceError(f"iteration {it}: {exc}", trace) from exc
            halted = it
            break
        trace.append({"iter": it, "elbo": res.value, "loglik": res.loglik, "kl": res.kl,
                      "grad_norm": float(np.linalg.norm(res.gradient))})
        params.values = rmsprop_step(state, params.values, rescale_flat(params, -res.gradient), cfg.learning_rate)
        if callback:
            callback(it, res, params)
    with torch.no_grad():
        final = replay_gaussian(params, torch.from_numpy(params.values.copy()),
                                draw_noise(grid, x0, cfg.m_paths, cfg.seed, cfg.iterations), None, 0.0)
    tail = max(1, len(trace) // 10)
    final_elbo = float(np.mean([r["elbo"] for r in trace[-tail:]])) if trace else float("nan")
    params.constants.update({"d": params.config.dim, "dt": horizon / cfg.n_steps})
    return TrainResult(params, trace, final.states[-1].numpy().copy(), None, final_elbo, halted_at=halted)


def gaussian_prior_paths(params: ModelParams, grid, x0, seed: int, batch: int = 0) -> np.ndarray:
    """Prior paths ``dX = f dt + sigma dW`` from starting states ``x0`` (``(m, d)``)."""
    grid = np.asarray(grid, dtype=float)
    x0 = np.atleast_2d(x0)
    sigma = np.exp(params["diffusion.log_sigma"])
    z = stream(seed, Purpose.FORECAST, batch).standard_normal((grid.size - 1,) + x0.shape)
    out = np.empty((grid.size,) + x0.shape)
    out[0] = x0
    drift = params.drift_spec()
    for j in range(grid.size - 1):
        dt = grid[j + 1] - grid[j]
        out[j + 1] = out[j] + drift(out[j]) * dt + sigma * math.sqrt(dt) * z[j]
    return out
