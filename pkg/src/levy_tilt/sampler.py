"""Forward simulation of the tilted posterior SDE.

Jumps are drawn through the conditionally Gaussian representation: a mixing
scale ``r`` from the tilted mixing density (exact rejection against the
Pareto proposal, envelope from :mod:`tilting`), then a Gaussian jump with the
closed-form conditional mean and variance.  Jump counts come from a Monte
Carlo intensity estimate whose Pareto samples are also used for the KL cost.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .kl import kl_integrand_log, kl_integrand_log_grad
from .rng import Purpose, stream
from .stable import LatentPath, StableSpec, one_sided_mass, sample_jump_magnitude
from .tilting import TiltCoeffs, conditional_params, log_envelope_params

log = logging.getLogger(__name__)

DEFAULT_MAX_ATTEMPTS = 10**6
_MAX_BLOCK = 1 << 16
_MAX_CELLS = 1 << 22

envelope_violations = 0


class RejectionCapError(RuntimeError):
    """The rejection sampler exceeded its attempt cap."""


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int, path: int, msg: str = "non-finite state"):
        super().__init__(f"{msg} at step {step}, path {path}")
        self.step = step
        self.path = path


def sample_mixing_scales(a, k1, spec: StableSpec, rng_propose, rng_accept,
                         max_attempts: int = DEFAULT_MAX_ATTEMPTS, on_cap: str = "raise"):
    """Exact draws from the tilted mixing density ``C(r) r**(-1-alpha)`` on ``[tau, inf)``.

    ``a`` and ``k1`` are arrays of equal length, one entry per requested draw.
    Proposals are generated in growing blocks per pending draw and the first
    accepted proposal in each block sequence is kept, which is the usual
    sequential rejection sampler evaluated in bulk.

    Returns ``(r, attempts)``.  When a draw reaches ``max_attempts``,
    :class:`RejectionCapError` is raised, or with ``on_cap="mark"`` the draw
    is left as NaN.
    """
    global envelope_violations
    a = np.atleast_1d(np.asarray(a, dtype=float))
    k1 = np.broadcast_to(np.asarray(k1, dtype=float), a.shape)
    n = a.size
    r_out = np.full(n, np.nan)
    attempts = np.zeros(n, dtype=np.int64)
    log_m = log_envelope_params(a, k1)
    pending = np.arange(n)
    block = 4
    while pending.size:
        b = max(1, min(block, _MAX_CELLS // pending.size))
        u = rng_propose.random((pending.size, b))
        r = sample_jump_magnitude(spec, u)
        _, _, log_c = conditional_params(a[pending, None], k1[pending, None], r, spec.sigma_g)
        log_ratio = log_c - log_m[pending, None]
        bad = int(np.count_nonzero(log_ratio > 1e-12))
        if bad:
            envelope_violations += bad
            log.error("envelope violated on %d proposals", bad)
        hit = np.log(rng_accept.random((pending.size, b))) < log_ratio
        any_hit = hit.any(axis=1)
        first = np.argmax(hit, axis=1)
        attempts[pending] += np.where(any_hit, first + 1, b)
        done = pending[any_hit]
        r_out[done] = r[any_hit, first[any_hit]]
        pending = pending[~any_hit]
        capped = attempts[pending] >= max_attempts
        if on_cap == "mark" and capped.any():
            pending = pending[~capped]
        elif capped.any():
            raise RejectionCapError(
                f"rejection sampler exceeded {max_attempts} attempts for {pending.size} draws; "
                "the envelope may be violated"
            )
        block = min(block * 4, _MAX_BLOCK)
    return r_out, attempts


def sample_mixing_scale(coeffs: TiltCoeffs, dim: int, x: float, spec: StableSpec, rng,
                        max_attempts: int = DEFAULT_MAX_ATTEMPTS):
    """One draw of the mixing scale; returns ``(r, attempts)``."""
    r, att = sample_mixing_scales([coeffs.a[dim]], [coeffs.k1(dim, x)], spec, rng, rng, max_attempts)
    return float(r[0]), int(att[0])


def sample_tilted_jump(coeffs: TiltCoeffs, dim: int, x: float, spec: StableSpec, rng,
                       max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> float:
    r, _ = sample_mixing_scale(coeffs, dim, x, spec, rng, max_attempts)
    mu, var, _ = conditional_params(coeffs.a[dim], coeffs.k1(dim, x), r, spec.sigma_g)
    return float(mu + np.sqrt(var) * rng.standard_normal())


def sample_tilted_jumps(a, k1, spec: StableSpec, rng_propose, rng_accept, rng_normal,
                        max_attempts: int = DEFAULT_MAX_ATTEMPTS, on_cap: str = "raise"):
    """Vectorised tilted jumps; returns ``(y, r, z)`` with ``y = mu(r) + sd(r) z``."""
    r, _ = sample_mixing_scales(a, k1, spec, rng_propose, rng_accept, max_attempts, on_cap)
    z = rng_normal.standard_normal(r.size)
    mu, var, _ = conditional_params(a, k1, r, spec.sigma_g)
    return mu + np.sqrt(var) * z, r, z


@dataclass
class IntensityEstimate:
    """Monte Carlo jump intensity for one step.

    ``per_dim`` holds the expected count per dimension, ``lam`` their sum.
    ``samples`` are the Pareto magnitudes (``(d, k)``) and ``h_plus`` /
    ``h_minus`` the tilt factors at ``+y`` and ``-y``, kept for reuse by the
    KL estimator.
    """

    lam: float
    per_dim: np.ndarray
    k_samples: int
    samples: np.ndarray
    h_plus: np.ndarray
    h_minus: np.ndarray


def estimate_intensity(coeffs: TiltCoeffs, x, spec: StableSpec, dt: float, k: int, rng) -> IntensityEstimate:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = sample_jump_magnitude(spec, rng.random((x.size, k)))
    k1 = (2.0 * coeffs.a * x + coeffs.b)[:, None]
    a = coeffs.a[:, None]
    h_plus = np.exp(a * y * y + k1 * y)
    h_minus = np.exp(a * y * y - k1 * y)
    per_dim = dt * one_sided_mass(spec) / k * (h_plus + h_minus).sum(axis=1)
    return IntensityEstimate(float(per_dim.sum()), per_dim, k, y, h_plus, h_minus)


@dataclass
class JumpRecord:
    """Stopped randomness of a batch simulation: one entry per jump."""

    step: np.ndarray
    path: np.ndarray
    dim: np.ndarray
    r: np.ndarray
    z: np.ndarray
    size: np.ndarray

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        i = np.zeros(0, dtype=np.int64)
        return cls(i, i, i, z, z, z)


@dataclass
class PosteriorBatch:
    """``m`` posterior paths simulated together on a common grid.

    ``kl_hat`` and ``lam`` are the per-step, per-path, per-dimension KL and
    intensity estimates, both computed from the same Pareto samples.  The
    samples for step ``j`` come from ``stream(seed, KL_SAMPLES, batch, j)``
    and can be regenerated with :func:`kl_samples`.
    """

    times: np.ndarray
    states: np.ndarray  # (n_steps + 1, m, d)
    tilt_a: np.ndarray  # (n_steps, d)
    tilt_b: np.ndarray
    jumps: JumpRecord
    kl_hat: np.ndarray  # (n_steps, m, d)
    lam: np.ndarray  # (n_steps, m, d)
    seed: int
    batch: int
    k_samples: int
    abort_step: Optional[np.ndarray] = None  # (m,), -1 for paths that ran to the end
    path_index: Optional[np.ndarray] = None  # original path ids after :meth:`alive`
    m_total: int = 0
    kl_da: Optional[np.ndarray] = None  # d kl_hat / d a, same shape as kl_hat
    kl_dk1: Optional[np.ndarray] = None  # d kl_hat / d K1

    def __post_init__(self):
        m = self.states.shape[1]
        if self.abort_step is None:
            self.abort_step = np.full(m, -1, dtype=np.int64)
        if self.path_index is None:
            self.path_index = np.arange(m)
        if not self.m_total:
            self.m_total = m

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]

    @property
    def aborted(self) -> np.ndarray:
        return self.abort_step >= 0

    def alive(self) -> "PosteriorBatch":
        """The sub-batch of paths that were not aborted, with jump records re-indexed."""
        keep = np.flatnonzero(~self.aborted)
        if keep.size == self.n_paths:
            return self
        remap = np.full(self.n_paths, -1, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        jr = self.jumps
        sel = remap[jr.path] >= 0
        jumps = JumpRecord(jr.step[sel], remap[jr.path[sel]], jr.dim[sel], jr.r[sel], jr.z[sel], jr.size[sel])
        sub = (lambda v: None if v is None else v[:, keep])
        return PosteriorBatch(self.times, self.states[:, keep], self.tilt_a, self.tilt_b, jumps,
                              self.kl_hat[:, keep], self.lam[:, keep], self.seed, self.batch, self.k_samples,
                              self.abort_step[keep], self.path_index[keep], self.m_total,
                              sub(self.kl_da), sub(self.kl_dk1))

    def path(self, m: int) -> LatentPath:
        sel = self.jumps.path == m
        return LatentPath(self.times.copy(), self.states[:, m, :].copy(), self.jumps.step[sel],
                          self.jumps.dim[sel], self.jumps.size[sel], self.seed)

    def total_jumps(self) -> np.ndarray:
        return np.bincount(self.jumps.path, minlength=self.n_paths)


#: a path is aborted once its expected jump count in a step exceeds this
#: multiple of the untilted count, or turns non-finite
ABORT_INTENSITY_FACTOR = 100.0


def kl_samples(spec: StableSpec, seed: int, batch: int, step: int, shape) -> np.ndarray:
    """Regenerate the Pareto magnitudes used at ``step`` of a batch simulation."""
    return sample_jump_magnitude(spec, stream(seed, Purpose.KL_SAMPLES, batch, step).random(shape))


def simulate_posterior(
    tilt_a: np.ndarray,
    tilt_b: np.ndarray,
    drift: Callable[[np.ndarray], np.ndarray],
    spec: StableSpec,
    grid: np.ndarray,
    x0,
    m_paths: int,
    k: int,
    seed: int,
    batch: int = 0,
    count_sampler: Optional[Callable] = None,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    abort_paths: bool = True,
    kl_grads: bool = False,
) -> PosteriorBatch:
    """Simulate ``m_paths`` tilted-posterior paths on ``grid``.

    ``tilt_a`` and ``tilt_b`` hold the coefficients at ``grid[:-1]``, shape
    ``(n_steps, d)``; every jump within a step conditions on the step-start
    state.  ``drift`` maps an ``(m, d)`` state array to its drift.

    A path whose state turns non-finite, or whose expected jump count in a step
    exceeds ``ABORT_INTENSITY_FACTOR`` times the untilted count, or whose
    expected rejection proposals for a step exceed ``max_attempts``, is aborted:
    its remaining states are NaN, its jumps are dropped from the record and
    ``abort_step`` holds the step.  With ``abort_paths=False`` the first such
    event raises :class:`NonFiniteStateError` instead.  ``kl_grads`` also
    stores the derivatives of ``kl_hat`` in ``a`` and ``K1``.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with at least two nodes")
    n_steps = grid.size - 1
    tilt_a = np.asarray(tilt_a, dtype=float).reshape(n_steps, -1)
    tilt_b = np.asarray(tilt_b, dtype=float).reshape(n_steps, -1)
    if np.any(tilt_a >= 0):
        raise ValueError("tilt coefficients a must be negative")
    d = tilt_a.shape[1]
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (d,))
    c_mass = one_sided_mass(spec)
    states = np.empty((n_steps + 1, m_paths, d))
    states[0] = x0
    kl_hat = np.empty((n_steps, m_paths, d))
    lam = np.empty((n_steps, m_paths, d))
    kl_da = np.empty((n_steps, m_paths, d)) if kl_grads else None
    kl_dk1 = np.empty((n_steps, m_paths, d)) if kl_grads else None
    rec = {key: [] for key in ("step", "path", "dim", "r", "z", "size")}
    abort_step = np.full(m_paths, -1, dtype=np.int64)
    lam_cap = ABORT_INTENSITY_FACTOR * 2.0 * c_mass * np.diff(grid)
    log_cap = np.log(max_attempts)
    for j in range(n_steps):
        live = abort_step < 0
        x = np.where(live[:, None], states[j], 0.0)
        dt = grid[j + 1] - grid[j]
        a = tilt_a[j]
        k1 = 2.0 * a * x + tilt_b[j]  # (m, d)
        y = kl_samples(spec, seed, batch, j, (m_paths, d, k))
        ay2 = a[None, :, None] * y * y
        l_plus = ay2 + k1[:, :, None] * y
        l_minus = ay2 - k1[:, :, None] * y
        with np.errstate(over="ignore", invalid="ignore"):
            h_sum = np.exp(l_plus) + np.exp(l_minus)
            lam[j] = dt * c_mass / k * h_sum.sum(axis=2)
            kl_hat[j] = c_mass / k * (kl_integrand_log(l_plus) + kl_integrand_log(l_minus)).sum(axis=2)
            if kl_grads:
                gp, gm = kl_integrand_log_grad(l_plus), kl_integrand_log_grad(l_minus)
                kl_da[j] = c_mass / k * ((gp + gm) * y * y).sum(axis=2)
                kl_dk1[j] = c_mass / k * ((gp - gm) * y).sum(axis=2)
        # expected proposals for the step: untilted count times the envelope
        budget = log_envelope_params(a, k1) + np.log(lam_cap[j] / ABORT_INTENSITY_FACTOR)
        bad = live & ~np.all(np.isfinite(lam[j]) & (lam[j] <= lam_cap[j]) & (budget <= log_cap), axis=1)
        if bad.any():
            if not abort_paths:
                raise NonFiniteStateError(j, int(np.flatnonzero(bad)[0]), "degenerate jump intensity")
            _abort(abort_step, bad, j)
            live = abort_step < 0
        lam[j][~live] = np.nan
        kl_hat[j][~live] = np.nan
        rng_count = stream(seed, Purpose.JUMP_COUNT, batch, j)
        rate = np.where(live[:, None], lam[j], 0.0)
        counts = (count_sampler(rng_count, rate) if count_sampler else rng_count.poisson(rate))
        counts = np.asarray(counts, dtype=np.int64).reshape(m_paths, d)
        counts[~live] = 0
        jump_sum = np.zeros((m_paths, d))
        total = int(counts.sum())
        if total:
            pm, pd = np.nonzero(counts)
            rep = counts[pm, pd]
            pm = np.repeat(pm, rep)
            pd = np.repeat(pd, rep)
            ysz, r, z = sample_tilted_jumps(
                a[pd], k1[pm, pd], spec,
                stream(seed, Purpose.PROPOSAL, batch, j),
                stream(seed, Purpose.ACCEPT, batch, j),
                stream(seed, Purpose.NORMAL, batch, j),
                max_attempts,
                "mark" if abort_paths else "raise",
            )
            capped = ~np.isfinite(r)
            if capped.any():
                hit = np.zeros(m_paths, dtype=bool)
                hit[pm[capped]] = True
                _abort(abort_step, hit, j)
                ysz = np.where(capped, 0.0, ysz)
            np.add.at(jump_sum, (pm, pd), ysz)
            for key, val in (("step", np.full(total, j)), ("path", pm), ("dim", pd),
                             ("r", r), ("z", z), ("size", ysz)):
                rec[key].append(val)
        with np.errstate(over="ignore", invalid="ignore"):
            states[j + 1] = x + drift(x) * dt + jump_sum
        bad = live & ~np.all(np.isfinite(states[j + 1]), axis=1)
        if bad.any():
            if not abort_paths:
                raise NonFiniteStateError(j + 1, int(np.flatnonzero(bad)[0]))
            _abort(abort_step, bad, j)
        states[j + 1][abort_step >= 0] = np.nan
    jumps = JumpRecord(*(np.concatenate(rec[k_]) if rec[k_] else getattr(JumpRecord.empty(), k_)
                         for k_ in ("step", "path", "dim", "r", "z", "size")))
    if np.any(abort_step >= 0):
        sel = abort_step[jumps.path] < 0
        jumps = JumpRecord(*(getattr(jumps, f)[sel] for f in ("step", "path", "dim", "r", "z", "size")))
    return PosteriorBatch(grid, states, tilt_a, tilt_b, jumps, kl_hat, lam, seed, batch, k, abort_step,
                          kl_da=kl_da, kl_dk1=kl_dk1)


def _abort(abort_step: np.ndarray, bad: np.ndarray, step: int) -> None:
    for m in np.flatnonzero(bad):
        log.warning("path %d aborted at step %d: degenerate state or jump intensity", m, step)
    abort_step[bad] = step


def simulate_posterior_path(params, spec: StableSpec, grid, x0, k: int, seed: int,
                            count_sampler: Optional[Callable] = None) -> LatentPath:
    """Single posterior path for a trained model (``params`` is a ``ModelParams``)."""
    grid = np.asarray(grid, dtype=float)
    a, b = params.tilt_arrays(grid[:-1])
    batch = simulate_posterior(a, b, params.drift_numpy, spec, grid, x0, 1, k, seed,
                               count_sampler=count_sampler, abort_paths=False)
    return batch.path(0)
