import math

import numpy as np
import pytest
from scipy import integrate, stats

from levy_tilt.neural import DriftSpec
from levy_tilt.stable import (GroundTruthConfig, LatentPath, StableSpec, jump_magnitude_cdf, matched_sigma_g,
                              one_sided_mass, sample_jump_magnitude, simulate_ground_truth, simulate_prior_batch)


def test_one_sided_mass_values():
    assert one_sided_mass(StableSpec(1.0, 0.01)) == pytest.approx(100.0, rel=1e-14)
    assert one_sided_mass(StableSpec(0.5, 1.0)) == pytest.approx(2.0, rel=1e-14)


def test_one_sided_mass_matches_quadrature():
    spec = StableSpec(1.5, 0.01)
    f = lambda u: math.exp(-spec.alpha * u)  # y^(-1-a) dy in log y
    val, _ = integrate.quad(f, math.log(spec.tau), math.log(1e6), epsrel=1e-12, limit=200)
    # the [tau, 1e6] quadrature misses 1e-9/alpha of mass, far below 1e-6 relative
    assert abs(val - one_sided_mass(spec)) / one_sided_mass(spec) < 1e-6


def test_one_sided_mass_monotone():
    alphas = np.linspace(0.2, 1.9, 12)
    taus = np.array([0.001, 0.01, 0.1, 0.5, 0.9])
    grid = np.array([[one_sided_mass(StableSpec(a, t)) for t in taus] for a in alphas])
    assert np.all(np.diff(grid, axis=1) < 0)  # decreasing in tau
    # d/d alpha of tau^-a / a has the sign of ln(1/tau) - 1/a, so the alpha direction depends on tau
    for j, t in enumerate(taus):
        sign = np.sign(math.log(1 / t) - 1 / alphas)
        fine = np.array([one_sided_mass(StableSpec(a + 1e-6, t)) - one_sided_mass(StableSpec(a, t)) for a in alphas])
        assert np.array_equal(np.sign(fine), sign)
    assert one_sided_mass(StableSpec(0.9, 0.9)) > one_sided_mass(StableSpec(1.1, 0.9))
    assert one_sided_mass(StableSpec(0.9, 0.01)) < one_sided_mass(StableSpec(1.1, 0.01))


def test_spec_validation():
    for bad in (dict(alpha=0.0), dict(alpha=2.0), dict(alpha=1.0, tau=0.0), dict(alpha=1.0, sigma_g=-1.0)):
        with pytest.raises(ValueError):
            StableSpec(**bad)


def test_sample_jump_magnitude_examples():
    assert sample_jump_magnitude(StableSpec(1.3, 0.07), 0.0) == 0.07
    assert sample_jump_magnitude(StableSpec(1.0, 0.01), 0.5) == pytest.approx(0.02, rel=1e-15)
    with pytest.raises(ValueError):
        sample_jump_magnitude(StableSpec(1.0, 0.01), 1.0)
    with pytest.raises(ValueError):
        sample_jump_magnitude(StableSpec(1.0, 0.01), -0.1)


@pytest.mark.parametrize("alpha,tau", [(0.7, 0.01), (1.2, 0.05), (1.8, 1.0)])
def test_sample_jump_magnitude_ks(alpha, tau):
    spec = StableSpec(alpha, tau)
    y = sample_jump_magnitude(spec, np.random.default_rng(1).random(100_000))
    assert y.min() >= tau
    ks = stats.kstest(y, lambda v: jump_magnitude_cdf(spec, v)).statistic
    assert ks < 0.01


def test_poisson_mean_of_total_jump_count():
    spec = StableSpec(1.9, 0.5)
    horizon, reps = 2.0, 1000
    counts = []
    for r in range(reps):
        gt = simulate_ground_truth(GroundTruthConfig(spec, DriftSpec.zero(), horizon, 20, [0.0], seed=3, replicate=r))
        counts.append(gt.jump_size.size)
    mean = 2 * one_sided_mass(spec) * horizon
    se = math.sqrt(mean / reps)
    assert abs(np.mean(counts) - mean) < 3 * se


def test_no_jump_case_is_deterministic_euler():
    spec = StableSpec(1.2, 0.01)
    cfg = GroundTruthConfig(spec, DriftSpec.ou([1.0], [0.0]), 1.0, 50, [2.0], seed=0)
    gt = simulate_ground_truth(cfg, count_sampler=lambda rng, lam: np.zeros_like(lam, dtype=int))
    x = np.empty(51)
    x[0] = 2.0
    for j in range(50):
        x[j + 1] = x[j] + 1.0 * (0.0 - x[j]) * 0.02
    assert np.array_equal(gt.states[:, 0], x)
    assert gt.jump_size.size == 0


def test_single_step_jump_sum_two_sampler_agreement():
    spec = StableSpec(1.2, 0.01)
    dt = 1e-3
    n = 100_000
    paths = simulate_prior_batch(lambda x: np.zeros_like(x), spec, [0.0, dt], np.zeros((n, 1)), seed=7)
    ours = paths[1, :, 0]
    # independent sampler: scipy Pareto magnitudes, numpy Poisson counts
    g = np.random.default_rng(99)
    k = g.poisson(2 * one_sided_mass(spec) * dt, n)
    mags = stats.pareto(spec.alpha, scale=spec.tau).rvs(k.sum(), random_state=g)
    signed = mags * g.choice([-1.0, 1.0], k.sum())
    ref = np.zeros(n)
    np.add.at(ref, np.repeat(np.arange(n), k), signed)
    assert stats.ks_2samp(ours, ref).statistic < 0.02


def test_sign_symmetry():
    spec = StableSpec(1.5, 0.001)
    gt = simulate_ground_truth(GroundTruthConfig(spec, DriftSpec.zero(), 3.0, 10, [0.0], seed=4))
    assert gt.jump_size.size > 100_000
    y = gt.jump_size[:100_000]
    assert abs(np.mean(y > 0) - 0.5) < 0.01
    assert np.all(np.abs(gt.jump_size) >= spec.tau)


def test_ground_truth_reproducible(tmp_path):
    cfg = GroundTruthConfig(StableSpec(1.2, 0.05), DriftSpec.ou([1.5], [0.3]), 2.0, 100, [0.3, -0.1], seed=11)
    a, b = simulate_ground_truth(cfg), simulate_ground_truth(cfg)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.jump_size, b.jump_size)
    other = simulate_ground_truth(GroundTruthConfig(cfg.spec, cfg.drift, 2.0, 100, cfg.x0, seed=12))
    assert not np.array_equal(a.states, other.states)
    a.to_csv(tmp_path / "p.csv")
    back = LatentPath.from_csv(tmp_path / "p.csv")
    assert np.array_equal(back.states, a.states)
    assert np.array_equal(back.jump_step, a.jump_step) and np.array_equal(back.jump_size, a.jump_size)
    assert np.allclose(back.jump_sums(), a.jump_sums(), atol=0)


def test_ground_truth_states_consistent_with_logged_jumps():
    cfg = GroundTruthConfig(StableSpec(1.2, 0.05), DriftSpec.ou([1.5], [0.3]), 2.0, 200, [0.0], seed=2)
    gt = simulate_ground_truth(cfg)
    x = gt.states[:-1]
    pred = x + cfg.drift.eval_numpy(x) * 0.01 + gt.jump_sums()
    assert np.max(np.abs(pred - gt.states[1:])) < 1e-12


def test_matched_sigma_g_tail_constant():
    # sigma_g * r * Z with Pareto r has tail mass sg^a E|Z|^a (tau/x)^a; matched sg makes it (tau/x)^a
    alpha = 1.3
    sg = matched_sigma_g(alpha)
    e_abs = np.mean(np.abs(np.random.default_rng(0).standard_normal(2_000_000)) ** alpha)
    assert sg**alpha * e_abs == pytest.approx(1.0, rel=5e-3)
