"""Truncated symmetric alpha-stable jump law and the ground-truth simulator."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import special

from .rng import Purpose, stream


@dataclass(frozen=True)
class StableSpec:
    """Prior jump law: stability index, truncation threshold, Gaussian mixture scale."""

    alpha: float
    tau: float = 0.01
    sigma_g: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must lie in (0, 2), got {self.alpha}")
        if not self.tau > 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.sigma_g > 0.0:
            raise ValueError(f"sigma_g must be positive, got {self.sigma_g}")


def one_sided_mass(spec: StableSpec) -> float:
    """Mass of the truncated measure on ``[tau, inf)``, i.e. ``tau**-alpha / alpha``."""
    return spec.tau ** (-spec.alpha) / spec.alpha


def matched_sigma_g(alpha: float) -> float:
    """Gaussian mixture scale whose jump tail matches the truncated power law.

    The conditionally Gaussian jump ``y = sigma_g * r * Z`` with Pareto ``r``
    has ``P(|y| > x) ~ sigma_g**alpha * E|Z|**alpha * (tau / x)**alpha``.  The
    returned scale makes the constant equal to one, so aggregated increments of
    both representations converge to the same stable law.
    """
    abs_moment = 2.0 ** (alpha / 2.0) * special.gamma((alpha + 1.0) / 2.0) / math.sqrt(math.pi)
    return abs_moment ** (-1.0 / alpha)


def sample_jump_magnitude(spec: StableSpec, u):
    """Inverse-CDF draw ``tau * (1 - u) ** (-1 / alpha)``; accepts scalars or arrays."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0.0) or np.any(u_arr >= 1.0):
        raise ValueError("u must lie in [0, 1)")
    y = spec.tau * (1.0 - u_arr) ** (-1.0 / spec.alpha)
    return float(y) if np.ndim(y) == 0 else y


def jump_magnitude_cdf(spec: StableSpec, y):
    y = np.asarray(y, dtype=float)
    return np.where(y < spec.tau, 0.0, 1.0 - (spec.tau / np.maximum(y, spec.tau)) ** spec.alpha)


@dataclass
class LatentPath:
    """A simulated trajectory and the jumps that produced it.

    ``jump_step[i]``, ``jump_dim[i]`` and ``jump_size[i]`` describe the i-th
    logged jump; jumps logged at step ``j`` are applied between ``times[j]``
    and ``times[j + 1]``.
    """

    times: np.ndarray
    states: np.ndarray
    jump_step: np.ndarray
    jump_dim: np.ndarray
    jump_size: np.ndarray
    seed: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def jumps_at(self, step: int) -> list[tuple[int, float]]:
        sel = self.jump_step == step
        return list(zip(self.jump_dim[sel].tolist(), self.jump_size[sel].tolist()))

    def jump_sums(self) -> np.ndarray:
        """Per-step, per-dimension sum of logged jumps, shape ``(n_steps, d)``."""
        out = np.zeros((self.n_steps, self.dim))
        np.add.at(out, (self.jump_step, self.jump_dim), self.jump_size)
        return out

    def to_csv(self, path, jumps_path=None) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"dim_{i}" for i in range(self.dim)])
            for t, row in zip(self.times, self.states):
                w.writerow([_fmt(t)] + [_fmt(v) for v in row])
        jumps_path = Path(jumps_path) if jumps_path else path.with_name(path.stem + "_jumps.csv")
        with jumps_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "dim", "size"])
            for s, d, y in zip(self.jump_step, self.jump_dim, self.jump_size):
                w.writerow([_fmt(self.times[s + 1]), int(d), _fmt(y)])

    @classmethod
    def from_csv(cls, path, jumps_path=None, seed: int = 0) -> "LatentPath":
        path = Path(path)
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        times, states = data[:, 0], data[:, 1:]
        jumps_path = Path(jumps_path) if jumps_path else path.with_name(path.stem + "_jumps.csv")
        jd = np.loadtxt(jumps_path, delimiter=",", skiprows=1, ndmin=2)
        if jd.size == 0:
            jd = np.zeros((0, 3))
        step = np.searchsorted(times, jd[:, 0]) - 1
        return cls(times, states, step.astype(int), jd[:, 1].astype(int), jd[:, 2], seed)


def _fmt(v) -> str:
    return format(float(v), ".17g")


@dataclass
class GroundTruthConfig:
    spec: StableSpec
    drift: "object"  # a neural.DriftSpec; anything with ``eval_numpy(x)``
    horizon: float
    n_steps: int
    x0: np.ndarray
    seed: int = 0
    replicate: int = 0

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))


CountSampler = Callable[[np.random.Generator, np.ndarray], np.ndarray]


def _poisson(rng: np.random.Generator, lam: np.ndarray) -> np.ndarray:
    return rng.poisson(lam)


def simulate_ground_truth(
    cfg: GroundTruthConfig,
    count_sampler: Optional[CountSampler] = None,
) -> LatentPath:
    """Euler scheme for ``dX = f(X) dt + dL`` with compound-Poisson truncated stable jumps.

    Jump magnitudes, signs and counts use separate streams keyed by the seed,
    the replicate index and the step.  ``count_sampler`` replaces the Poisson
    draw (used to force jump-free paths).
    """
    spec = cfg.spec
    count_sampler = count_sampler or _poisson
    d = cfg.x0.size
    dt = cfg.horizon / cfg.n_steps
    times = np.linspace(0.0, cfg.horizon, cfg.n_steps + 1)
    states = np.empty((cfg.n_steps + 1, d))
    states[0] = cfg.x0
    lam = np.full(d, 2.0 * one_sided_mass(spec) * dt)
    steps, dims, sizes = [], [], []
    drift = cfg.drift
    for j in range(cfg.n_steps):
        x = states[j]
        counts = np.asarray(count_sampler(stream(cfg.seed, Purpose.GT_COUNT, cfg.replicate, j), lam), dtype=int)
        total = int(counts.sum())
        jump_sum = np.zeros(d)
        if total:
            u = stream(cfg.seed, Purpose.GT_MAGNITUDE, cfg.replicate, j).random(total)
            signs = np.where(stream(cfg.seed, Purpose.GT_SIGN, cfg.replicate, j).random(total) < 0.5, -1.0, 1.0)
            y = signs * sample_jump_magnitude(spec, u)
            dim_idx = np.repeat(np.arange(d), counts)
            np.add.at(jump_sum, dim_idx, y)
            steps.append(np.full(total, j))
            dims.append(dim_idx)
            sizes.append(y)
        states[j + 1] = x + drift.eval_numpy(x[None, :])[0] * dt + jump_sum
    cat = lambda xs, dt_: np.concatenate(xs) if xs else np.zeros(0, dtype=dt_)
    return LatentPath(times, states, cat(steps, int), cat(dims, int), cat(sizes, float), cfg.seed)


def simulate_prior_batch(drift, spec: StableSpec, grid, x0, seed: int, batch: int = 0,
                         count_sampler: Optional[CountSampler] = None) -> np.ndarray:
    """Vectorised compound-Poisson prior paths from the starting states ``x0`` (shape ``(m, d)``).

    Same jump law as :func:`simulate_ground_truth`; returns states of shape
    ``(len(grid), m, d)``.
    """
    grid = np.asarray(grid, dtype=float)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    m, d = x0.shape
    count_sampler = count_sampler or _poisson
    c2 = 2.0 * one_sided_mass(spec)
    out = np.empty((grid.size, m, d))
    out[0] = x0
    for j in range(grid.size - 1):
        dt = grid[j + 1] - grid[j]
        x = out[j]
        counts = np.asarray(count_sampler(stream(seed, Purpose.GT_COUNT, batch, j), np.full((m, d), c2 * dt)),
                            dtype=int).reshape(m, d)
        total = int(counts.sum())
        jump_sum = np.zeros((m, d))
        if total:
            u = stream(seed, Purpose.GT_MAGNITUDE, batch, j).random(total)
            signs = np.where(stream(seed, Purpose.GT_SIGN, batch, j).random(total) < 0.5, -1.0, 1.0)
            pm, pd = np.nonzero(counts)
            rep = counts[pm, pd]
            np.add.at(jump_sum, (np.repeat(pm, rep), np.repeat(pd, rep)), signs * sample_jump_magnitude(spec, u))
        out[j + 1] = x + drift(x) * dt + jump_sum
    return out
