"""ELBO estimation and the optimisation protocol.

One ELBO evaluation simulates a batch of posterior paths in numpy (drawing
jump counts, mixing scales and Gaussian noise), then replays the batch in
torch with that randomness held fixed.  The replay is a smooth function of
the parameters, so its gradient is the pathwise estimator with stopped
discrete randomness, and frozen-seed finite differences of the replay check
it exactly.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .kl import kl_integrand_log, kl_integrand_log_grad
from .neural import ModelConfig, ModelParams, backward, init_params
from .rng import Purpose, stream
from .sampler import NonFiniteStateError, PosteriorBatch, RejectionCapError, kl_samples, simulate_posterior
from .stable import LatentPath, StableSpec, one_sided_mass

log = logging.getLogger(__name__)


@dataclass
class Observations:
    """Noisy observations ``Y = X + N(0, sigma_eps**2)`` at increasing times."""

    times: np.ndarray
    values: np.ndarray
    sigma_eps: float = 0.1

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.values = np.asarray(self.values, dtype=float).reshape(self.times.size, -1)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if not self.sigma_eps > 0:
            raise ValueError("sigma_eps must be positive")

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class TrainConfig:
    m_paths: int = 500
    n_steps: int = 1000
    k_samples: int = 1000
    iterations: int = 3000
    learning_rate: float = 1e-4
    l2_scale: float = 1e-4
    seed: int = 0
    alpha_grid: Optional[Sequence[float]] = None
    rho: float = 0.9
    eps_opt: float = 1e-8
    #: "raise" halts with DivergenceError; "stop" halts and keeps the last finite parameters
    on_divergence: str = "raise"

    def __post_init__(self):
        for name in ("m_paths", "n_steps", "k_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_scale < 0:
            raise ValueError("l2_scale must be >= 0")
        if self.on_divergence not in ("raise", "stop"):
            raise ValueError("on_divergence must be 'raise' or 'stop'")


def snap_to_grid(times, grid) -> np.ndarray:
    """Index of the nearest grid node for each time; rejects times off the grid span."""
    times = np.asarray(times, dtype=float)
    grid = np.asarray(grid, dtype=float)
    tol = 1e-9 * max(1.0, abs(grid[-1] - grid[0]))
    if np.any(times < grid[0] - tol) or np.any(times > grid[-1] + tol):
        raise ValueError("observation time outside the latent horizon")
    idx = np.clip(np.searchsorted(grid, times), 1, grid.size - 1)
    left = grid[idx - 1]
    right = grid[idx]
    return np.where(times - left <= right - times, idx - 1, idx)


def log_likelihood(path: LatentPath, obs: Observations, sigma_eps=None) -> float:
    sig = np.broadcast_to(np.asarray(obs.sigma_eps if sigma_eps is None else sigma_eps, dtype=float), (obs.dim,))
    nodes = snap_to_grid(obs.times, path.times)
    resid = obs.values - path.states[nodes]
    return float(np.sum(-0.5 * np.log(2 * np.pi * sig**2) - 0.5 * (resid / sig) ** 2))


# ---------------------------------------------------------------------------
# KL cost with a hand-written backward: regenerates the Pareto samples step by
# step so memory stays O(n_steps * m * d) regardless of k.


class KLCost(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, k1, spec, seed, batch, k, paths, m_total, cached):
        if cached is not None:
            val, da, dk = cached
        else:
            val, da, dk = _kl_terms(a.detach().numpy(), k1.detach().numpy(), spec, seed, batch, k, paths, m_total)
        ctx.save_for_backward(torch.from_numpy(da), torch.from_numpy(dk))
        return torch.from_numpy(np.array(val))

    @staticmethod
    def backward(ctx, grad_out):
        da, dk = ctx.saved_tensors
        return (grad_out * da).sum(dim=1), grad_out * dk, None, None, None, None, None, None, None


def _kl_terms(a_np, k1_np, spec, seed, batch, k, paths, m_total):
    n_steps, m, d = k1_np.shape
    c = one_sided_mass(spec) / k
    val = np.empty((n_steps, m, d))
    da = np.empty_like(val)
    dk = np.empty_like(val)
    for j in range(n_steps):
        y = kl_samples(spec, seed, batch, j, (m_total, d, k))[paths]
        ay2 = a_np[j][None, :, None] * y * y
        ky = k1_np[j][:, :, None] * y
        lp, lm = ay2 + ky, ay2 - ky
        gp, gm = kl_integrand_log_grad(lp), kl_integrand_log_grad(lm)
        val[j] = c * (kl_integrand_log(lp) + kl_integrand_log(lm)).sum(axis=2)
        da[j] = c * ((gp + gm) * y * y).sum(axis=2)
        dk[j] = c * ((gp - gm) * y).sum(axis=2)
    return val, da, dk


def kl_cost(a: torch.Tensor, k1: torch.Tensor, spec: StableSpec, seed: int, batch: int, k: int,
            paths=None, m_total: Optional[int] = None, cached=None) -> torch.Tensor:
    """Per-step, per-path, per-dimension KL jump cost estimates, shape ``(n_steps, m, d)``.

    ``paths`` selects rows of a batch simulated with ``m_total`` paths, so the
    regenerated samples line up with the simulation after aborted paths are
    dropped.  ``cached`` is an optional ``(value, d/da, d/dK1)`` triple
    computed during simulation at the same coefficients.
    """
    m = k1.shape[1]
    paths = np.arange(m) if paths is None else np.asarray(paths)
    return KLCost.apply(a, k1, spec, seed, batch, k, paths, m_total or m, cached)


def intensity_torch(a: torch.Tensor, k1: torch.Tensor, y: torch.Tensor, dt: float, spec: StableSpec) -> torch.Tensor:
    """Differentiable Monte Carlo intensity for given Pareto samples ``y`` (last axis)."""
    ay2 = a[..., None] * y * y
    ky = k1[..., None] * y
    return dt * one_sided_mass(spec) * (torch.exp(ay2 + ky) + torch.exp(ay2 - ky)).mean(dim=-1)


def jump_sums(a: torch.Tensor, batch: PosteriorBatch, sigma_g: float):
    """Per-step sums over jumps of the conditional variance and of ``sd * z``.

    Each jump is ``mu + sd * z`` with ``mu = K1 * var``, so a step's total jump
    is ``K1 * S_var + S_noise``.
    """
    n_steps, m, d = batch.kl_hat.shape
    jr = batch.jumps
    s_var = torch.zeros(n_steps * m * d, dtype=torch.float64)
    s_noise = torch.zeros_like(s_var)
    if jr.step.size:
        aj = a[torch.from_numpy(jr.step), torch.from_numpy(jr.dim)]
        rs2 = torch.from_numpy((jr.r * sigma_g) ** 2)
        var = 1.0 / (1.0 / rs2 - 2.0 * aj)
        flat_idx = torch.from_numpy((jr.step * m + jr.path) * d + jr.dim)
        s_var = s_var.index_add(0, flat_idx, var)
        s_noise = s_noise.index_add(0, flat_idx, torch.sqrt(var) * torch.from_numpy(jr.z))
    return s_var.view(n_steps, m, d), s_noise.view(n_steps, m, d)


@dataclass
class ElboTerms:
    elbo: torch.Tensor
    loglik: torch.Tensor
    kl: torch.Tensor
    l2: torch.Tensor
    states: torch.Tensor


def _loglik_paths(states: torch.Tensor, nodes: np.ndarray, obs: Observations, sig: torch.Tensor) -> torch.Tensor:
    resid = torch.from_numpy(obs.values)[:, None, :] - states[torch.from_numpy(nodes)]
    ll = -0.5 * torch.log(2 * math.pi * sig**2) - 0.5 * (resid / sig) ** 2
    return ll.sum(dim=(0, 2))


def replay_tilted(params: ModelParams, flat: torch.Tensor, batch: PosteriorBatch, spec: StableSpec,
                  obs: Optional[Observations], l2_scale: float) -> ElboTerms:
    net = params.bind(flat)
    grid = batch.times
    dts = torch.from_numpy(np.diff(grid))
    a, b = net.tilt(torch.from_numpy(grid[:-1]))
    s_var, s_noise = jump_sums(a, batch, spec.sigma_g)
    x = torch.from_numpy(batch.states[0].copy())
    xs = [x]
    # unbind once: per-step indexing would make every backward node allocate a full-size gradient
    rows = zip(a.unbind(0), b.unbind(0), s_var.unbind(0), s_noise.unbind(0), np.diff(grid))
    for a_j, b_j, sv_j, sn_j, dt in rows:
        x = x + net.drift(x) * float(dt) + (2.0 * a_j * x + b_j) * sv_j + sn_j
        xs.append(x)
    states = torch.stack(xs)
    k1_all = 2.0 * a[:, None, :] * states[:-1] + b[:, None, :]
    cached = None if batch.kl_da is None else (batch.kl_hat, batch.kl_da, batch.kl_dk1)
    kl_hat = kl_cost(a, k1_all, spec, batch.seed, batch.batch, batch.k_samples, batch.path_index, batch.m_total,
                     cached)
    kl_path = (kl_hat.sum(dim=2) * dts[:, None]).sum(dim=0)
    if obs is not None and obs.n:
        ll_path = _loglik_paths(states, snap_to_grid(obs.times, grid), obs, net.sigma_eps())
    else:
        ll_path = torch.zeros_like(kl_path)
    l2 = l2_scale * net.l2()
    loglik = ll_path.mean()
    kl = kl_path.mean()
    return ElboTerms(loglik - kl - l2, loglik, kl, l2, states)


def simulate_batch(params: ModelParams, spec: StableSpec, grid, x0, m_paths: int, k: int, seed: int,
                   batch: int, count_sampler=None, kl_grads: bool = False) -> PosteriorBatch:
    a, b = params.tilt_arrays(np.asarray(grid)[:-1])
    return simulate_posterior(a, b, params.drift_numpy, spec, grid, x0, m_paths, k, seed, batch,
                              count_sampler=count_sampler, kl_grads=kl_grads)


@dataclass
class ElboResult:
    value: float
    gradient: np.ndarray
    loglik: float
    kl: float
    l2: float
    batch: object


def latent_grid(obs: Optional[Observations], horizon: float, n_steps: int) -> np.ndarray:
    return np.linspace(0.0, horizon, n_steps + 1)


def elbo(params: ModelParams, spec: StableSpec, obs: Optional[Observations], cfg: TrainConfig,
         x0=None, batch: int = 0, grid=None, count_sampler=None) -> ElboResult:
    """Monte Carlo ELBO and its gradient for the tilted-stable posterior."""
    grid = latent_grid(obs, params.config.horizon, cfg.n_steps) if grid is None else np.asarray(grid)
    x0 = _initial_state(obs, params, x0)
    sim = simulate_batch(params, spec, grid, x0, cfg.m_paths, cfg.k_samples, cfg.seed, batch, count_sampler,
                         kl_grads=True)
    live = sim.alive()
    if live.n_paths == 0:
        raise DivergenceError(f"all {sim.n_paths} paths aborted at batch {batch}")
    flat = torch.from_numpy(params.values.copy()).requires_grad_(True)
    terms = replay_tilted(params, flat, live, spec, obs, cfg.l2_scale)
    if not torch.isfinite(terms.elbo):
        raise DivergenceError(f"non-finite ELBO at batch {batch}")
    grad = backward(terms.elbo, flat, params)
    return ElboResult(float(terms.elbo.detach()), grad, float(terms.loglik.detach()), float(terms.kl.detach()),
                      float(terms.l2.detach()), sim)


def _initial_state(obs, params, x0):
    if x0 is not None:
        return np.atleast_1d(np.asarray(x0, dtype=float))
    if obs is not None and obs.n:
        return obs.values[0].copy()
    return np.zeros(params.config.dim)


class DivergenceError(FloatingPointError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


# ---------------------------------------------------------------------------
# optimiser


def rescale_gradients(grads, eps: float = 1e-12):
    """Layerwise robust rescaling.

    Each tensor ``g`` is divided by ``max(1, rms(g) / (q95(|g|) + eps))`` where
    ``q95`` is the linearly interpolated 0.95 quantile.  Accepts a list of
    arrays or a dict of arrays and returns the same container type.
    """
    def one(g):
        g = np.asarray(g, dtype=float)
        if g.size == 0:
            return g.copy()
        q = np.quantile(np.abs(g), 0.95)
        rms = np.linalg.norm(g) / math.sqrt(g.size)
        return g / max(1.0, rms / (q + eps))
    if isinstance(grads, dict):
        return {k: one(v) for k, v in grads.items()}
    return [one(g) for g in grads]


def rescale_flat(params: ModelParams, grad: np.ndarray) -> np.ndarray:
    out = np.empty_like(grad)
    pieces = rescale_gradients([grad[sl] for _, sl in params.slices()])
    for (_, sl), g in zip(params.slices(), pieces):
        out[sl] = g
    return out


@dataclass
class OptimizerState:
    accumulator: np.ndarray
    iteration: int = 0
    rho: float = 0.9
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, rho: float = 0.9, eps: float = 1e-8) -> "OptimizerState":
        return cls(np.zeros(n), 0, rho, eps)


def rmsprop_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """One RMSProp descent step with constant learning rate; updates ``state`` in place."""
    state.accumulator = state.rho * state.accumulator + (1.0 - state.rho) * grad * grad
    state.iteration += 1
    return params - lr * grad / np.sqrt(state.accumulator + state.eps)


# ---------------------------------------------------------------------------
# training loop


TRACE_FIELDS = ("iter", "elbo", "loglik", "kl", "grad_norm")


@dataclass
class TrainResult:
    params: ModelParams
    trace: list
    boundary: np.ndarray
    spec: Optional[StableSpec]
    final_elbo: float
    alpha_scores: dict = field(default_factory=dict)
    halted_at: Optional[int] = None  # iteration that diverged under on_divergence="stop"

    def write_trace(self, path) -> None:
        write_trace(self.trace, path)


def write_trace(trace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([row["iter"]] + [format(row[k], ".17g") for k in TRACE_FIELDS[1:]])


def write_diagnostics(trace, path) -> None:
    """Per-iteration count of aborted posterior paths."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iter", "aborted_paths"))
        for row in trace:
            w.writerow([row["iter"], row.get("aborted", 0)])


def read_trace(path) -> list:
    with Path(path).open() as fh:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def smoothed(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    w = min(window, v.size)
    return np.convolve(v, np.ones(w) / w, mode="valid")


def model_config_for(obs: Observations, kind: str, drift: str, horizon: float, **overrides) -> ModelConfig:
    cfg = ModelConfig(kind=kind, dim=obs.dim, horizon=horizon, drift=drift, sigma_eps=obs.sigma_eps)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def data_drift_init(obs: Observations, drift_variant: str) -> dict:
    """Starting drift values from the data: the OU level starts at the observed mean."""
    if drift_variant == "ou" and obs.n:
        return {"mu": obs.values.mean(axis=0)}
    return {}


def train(obs: Observations, spec: StableSpec, cfg: TrainConfig, drift_variant: str = "ou",
          horizon: Optional[float] = None, model_overrides: Optional[dict] = None,
          init: Optional[ModelParams] = None, drift_init: Optional[dict] = None,
          callback=None) -> TrainResult:
    """Fit the tilted-stable posterior and the drift by maximising the ELBO.

    With ``cfg.alpha_grid`` set, one run per alpha is made and the run with the
    highest final ELBO (mean of the last 10% of iterations) is returned; ties go
    to the smaller alpha.
    """
    if cfg.alpha_grid:
        runs = {}
        for al in sorted(cfg.alpha_grid):
            sub = TrainConfig(**{**cfg.__dict__, "alpha_grid": None})
            runs[al] = train(obs, StableSpec(al, spec.tau, spec.sigma_g), sub, drift_variant, horizon,
                             model_overrides, init, drift_init, callback)
        scores = {al: r.final_elbo for al, r in runs.items()}
        best = select_alpha(scores)
        res = runs[best]
        res.alpha_scores = scores
        return res

    horizon = float(obs.times[-1]) if horizon is None else float(horizon)
    params = init.copy() if init is not None else init_params(
        model_config_for(obs, "tilted", drift_variant, horizon, **(model_overrides or {})), cfg.seed,
        data_drift_init(obs, drift_variant) if drift_init is None else drift_init)
    state = OptimizerState.zeros(params.size, cfg.rho, cfg.eps_opt)
    grid = latent_grid(obs, params.config.horizon, cfg.n_steps)
    x0 = _initial_state(obs, params, None)
    trace = []
    halted = None
    for it in range(cfg.iterations):
        try:
            res = elbo(params, spec, obs, cfg, x0=x0, batch=it, grid=grid)
        except (NonFiniteStateError, RejectionCapError, DivergenceError, FloatingPointError) as exc:
            if cfg.on_divergence == "raise":
                raise DivergenceError(f"iteration {it}: {exc}", trace) from exc
            log.warning("iteration %d: %s; stopping with the last finite parameters", it, exc)
            halted = it
            break
        grad = rescale_flat(params, -res.gradient)
        trace.append({"iter": it, "elbo": res.value, "loglik": res.loglik, "kl": res.kl,
                      "grad_norm": float(np.linalg.norm(res.gradient)),
                      "aborted": int(res.batch.aborted.sum())})
        params.values = rmsprop_step(state, params.values, grad, cfg.learning_rate)
        if callback:
            callback(it, res, params)
    final = simulate_batch(params, spec, grid, x0, cfg.m_paths, cfg.k_samples, cfg.seed, cfg.iterations).alive()
    if final.n_paths == 0:
        raise DivergenceError("every boundary path aborted", trace)
    tail = max(1, len(trace) // 10)
    final_elbo = float(np.mean([r["elbo"] for r in trace[-tail:]])) if trace else float("nan")
    params.constants.update({"alpha": spec.alpha, "tau": spec.tau, "sigma_g": spec.sigma_g, "dt": params.config.horizon / cfg.n_steps,
                             "d": params.config.dim})
    return TrainResult(params, trace, final.states[-1].copy(), spec, final_elbo, halted_at=halted)


def select_alpha(scores: dict) -> float:
    """Argmax of the final ELBO; ties resolve to the smaller alpha."""
    best = max(scores.values())
    return min(al for al, v in scores.items() if v == best)
