import math

import numpy as np
import pytest
import torch
from scipy import stats

from levy_tilt.baseline import (draw_noise, gaussian_baseline_train, gaussian_elbo, quadratic_kl, replay_gaussian)
from levy_tilt.kl import kl_quadrature
from levy_tilt.neural import ModelConfig, backward, finite_difference_grad, init_params
from levy_tilt.stable import LatentPath, StableSpec
from levy_tilt.tilting import TiltCoeffs
from levy_tilt.training import (DivergenceError, Observations, OptimizerState, TrainConfig, data_drift_init, elbo,
                                intensity_torch, kl_cost, log_likelihood, read_trace, replay_tilted, rescale_flat,
                                rescale_gradients, rmsprop_step, select_alpha, simulate_batch, smoothed, snap_to_grid,
                                train, write_trace)

SPEC = StableSpec(1.5, 0.01, 1.0)


def small_config(kind="tilted", horizon=2.0, **kw):
    return ModelConfig(kind=kind, dim=1, horizon=horizon, n_ref=5, embed_dim=4, head_width=8, head_depth=2, **kw)


def toy_obs(n=21, horizon=2.0, seed=3):
    t = np.linspace(0, horizon, n)
    g = np.random.default_rng(seed)
    return Observations(t, 0.3 * np.sin(t)[:, None] + 0.05 * g.standard_normal((n, 1)), 0.1)


def path_through(times, values):
    return LatentPath(np.asarray(times, float), np.asarray(values, float).reshape(len(times), -1),
                      np.zeros(0, int), np.zeros(0, int), np.zeros(0))


# --- likelihood -------------------------------------------------------------

def test_loglik_zero_residuals():
    t = np.linspace(0, 1, 6)
    y = np.sin(t)[:, None]
    obs = Observations(t, y, 0.2)
    assert log_likelihood(path_through(t, y), obs) == pytest.approx(-3 * math.log(2 * math.pi * 0.04), rel=1e-14)


def test_loglik_one_sigma_residual():
    obs = Observations([0.5], [[1.0]], 0.3)
    base = log_likelihood(path_through([0.0, 0.5], [[0.0], [1.0]]), obs)
    off = log_likelihood(path_through([0.0, 0.5], [[0.0], [1.3]]), obs)
    assert off == pytest.approx(base - 0.5, rel=1e-14)


def test_loglik_random_against_density():
    g = np.random.default_rng(0)
    grid = np.linspace(0, 1, 101)
    states = g.normal(size=(101, 2))
    t_obs = np.sort(g.choice(grid[1:], 10, replace=False))
    y = g.normal(size=(10, 2))
    obs = Observations(t_obs, y, 0.4)
    nodes = np.searchsorted(grid, t_obs)
    want = stats.norm(states[nodes], 0.4).logpdf(y).sum()
    assert log_likelihood(path_through(grid, states), obs) == pytest.approx(want, rel=1e-12)


def test_snap_to_grid():
    grid = np.linspace(0, 1, 11)
    assert list(snap_to_grid([0.0, 0.04, 0.06, 0.149, 1.0], grid)) == [0, 0, 1, 1, 10]
    with pytest.raises(ValueError):
        snap_to_grid([1.2], grid)


def test_observation_validation():
    with pytest.raises(ValueError):
        Observations([0.0, 0.0], [[1.0], [2.0]])
    with pytest.raises(ValueError):
        Observations([0.0], [[1.0]], 0.0)


# --- ELBO ---------------------------------------------------------------------

def test_elbo_deterministic_and_decomposes():
    obs = toy_obs()
    p = init_params(small_config(), 0)
    cfg = TrainConfig(m_paths=8, n_steps=40, k_samples=50, seed=1)
    r1, r2 = elbo(p, SPEC, obs, cfg), elbo(p, SPEC, obs, cfg)
    assert r1.value == r2.value and np.array_equal(r1.gradient, r2.gradient)
    assert r1.value == r1.loglik - r1.kl - r1.l2
    assert elbo(p, SPEC, obs, cfg, batch=1).value != r1.value


def test_elbo_without_observations_near_prior():
    p = init_params(small_config(horizon=1.0), 0)
    p["head_a.b2"] = -50.0  # softplus(-50) ~ 2e-22 so A = -a_min
    cfg = TrainConfig(m_paths=16, n_steps=20, k_samples=1000)
    r = elbo(p, SPEC, None, cfg, x0=[0.0])
    assert r.loglik == 0.0
    assert r.value <= 0 and abs(r.value + r.l2) < 1e-2
    # the KL term is the jump cost at the near-zero tilt integrated over the horizon
    ref = kl_quadrature(TiltCoeffs([-1e-3], [0.0]), 0, 0.0, SPEC)
    assert r.kl == pytest.approx(ref, rel=0.5)


def test_replay_reproduces_simulation():
    obs = toy_obs()
    p = init_params(small_config(), 0)
    p.values = p.values + 0.1 * np.random.default_rng(2).standard_normal(p.size)
    sim = simulate_batch(p, SPEC, np.linspace(0, 2, 41), obs.values[0], 8, 50, 0, 0).alive()
    terms = replay_tilted(p, torch.from_numpy(p.values.copy()), sim, SPEC, obs, 0.0)
    assert np.max(np.abs(terms.states.detach().numpy() - sim.states)) < 1e-12
    assert np.allclose(terms.kl.item(), (sim.kl_hat.sum(axis=2) * 0.05).sum(axis=0).mean(), rtol=1e-13)


def frozen_elbo_check(p, obs, m, n, k, n_coords, seed=0):
    grid = np.linspace(0, obs.times[-1], n + 1)
    sim = simulate_batch(p, SPEC, grid, obs.values[0], m, k, seed, 0).alive()
    f = lambda v: float(replay_tilted(p, torch.from_numpy(v), sim, SPEC, obs, 1e-4).elbo.detach())
    flat = torch.from_numpy(p.values.copy()).requires_grad_(True)
    g = backward(replay_tilted(p, flat, sim, SPEC, obs, 1e-4).elbo, flat, p)
    idx = np.random.default_rng(seed).choice(p.size, n_coords, replace=False)
    fd = finite_difference_grad(f, p.values.copy(), idx, h=1e-5, order=4)
    return g[idx], fd


def test_elbo_gradient_finite_differences():
    obs = toy_obs()
    p = init_params(small_config(), 0)
    p.values = p.values + 0.1 * np.random.default_rng(3).standard_normal(p.size)
    g, fd = frozen_elbo_check(p, obs, 8, 40, 50, 50)
    rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6 * np.abs(fd).max())
    assert rel.max() < 1e-3


def test_kl_cost_and_intensity_gradients():
    g = np.random.default_rng(4)
    a0 = -np.exp(g.normal(-0.5, 0.3, (6, 1)))
    k0 = g.normal(0, 1, (6, 3, 1))
    def kl_fn(a, k):
        return kl_cost(a, k, SPEC, seed=5, batch=2, k=200).sum()
    a = torch.from_numpy(a0.copy()).requires_grad_(True)
    k = torch.from_numpy(k0.copy()).requires_grad_(True)
    kl_fn(a, k).backward()
    fd_a = finite_difference_grad(lambda v: float(kl_fn(torch.from_numpy(v.reshape(6, 1)), torch.from_numpy(k0))),
                                  a0.ravel(), range(6), h=1e-6, order=4)
    fd_k = finite_difference_grad(lambda v: float(kl_fn(torch.from_numpy(a0), torch.from_numpy(v.reshape(6, 3, 1)))),
                                  k0.ravel(), range(18), h=1e-6, order=4)
    assert np.allclose(a.grad.numpy().ravel(), fd_a, rtol=1e-4, atol=0)
    assert np.allclose(k.grad.numpy().ravel(), fd_k, rtol=1e-4, atol=1e-10)
    y = torch.from_numpy(np.random.default_rng(0).pareto(1.5, 300) * 0.01 + 0.01)
    ai = torch.tensor(-0.7, dtype=torch.float64, requires_grad=True)
    ki = torch.tensor(0.4, dtype=torch.float64, requires_grad=True)
    intensity_torch(ai, ki, y, 0.01, SPEC).backward()
    f = lambda v: float(intensity_torch(torch.tensor(v[0]), torch.tensor(v[1]), y, 0.01, SPEC))
    fd = finite_difference_grad(f, np.array([-0.7, 0.4]), [0, 1], h=1e-6, order=4)
    assert np.allclose([ai.grad.item(), ki.grad.item()], fd, rtol=1e-4)


def test_all_paths_aborted_raises():
    obs = toy_obs()
    p = init_params(small_config(), 0)
    p["head_b.b2"] = 500.0  # tilt maximiser far away: every path explodes
    with pytest.raises(DivergenceError):
        elbo(p, SPEC, obs, TrainConfig(m_paths=4, n_steps=20, k_samples=20))


# --- optimiser ------------------------------------------------------------------

def test_rescale_no_op_and_direction():
    g = np.random.default_rng(0).normal(size=50)
    out = rescale_gradients([g])[0]
    q, rms = np.quantile(np.abs(g), 0.95), np.linalg.norm(g) / math.sqrt(50)
    assert rms <= q and np.array_equal(out, g)
    spiky = np.r_[np.zeros(99), 1e6]
    o = rescale_gradients({"w": spiky})["w"]
    c = o[-1] / spiky[-1]
    assert c > 0 and np.allclose(o, c * spiky, rtol=0, atol=0)
    # q = 0 here, so the output rms is q + eps
    q_sorted = np.sort(np.abs(spiky))[94] + 0.05 * (np.sort(np.abs(spiky))[95] - np.sort(np.abs(spiky))[94])
    assert q_sorted == 0.0
    assert np.linalg.norm(o) / 10 == pytest.approx(1e-12, rel=1e-9)


def test_rescale_never_increases_norm():
    g = np.random.default_rng(1)
    for _ in range(200):
        v = g.standard_cauchy(g.integers(1, 40))
        assert np.linalg.norm(rescale_gradients([v])[0]) <= np.linalg.norm(v) * (1 + 1e-15)


def test_rescale_flat_is_layerwise():
    p = init_params(small_config(), 0)
    grad = np.random.default_rng(2).standard_cauchy(p.size)
    out = rescale_flat(p, grad)
    for _, sl in p.slices():
        assert np.array_equal(out[sl], rescale_gradients([grad[sl]])[0])


def test_rmsprop_examples():
    st = OptimizerState.zeros(3)
    x = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(rmsprop_step(st, x, np.zeros(3), 0.1), x)
    st = OptimizerState.zeros(1)
    st.accumulator[:] = 4.0
    rmsprop_step(st, np.zeros(1), np.zeros(1), 0.1)
    assert st.accumulator[0] == pytest.approx(3.6)
    st = OptimizerState.zeros(1)
    g = np.array([2.5])
    upd = np.zeros(1) - rmsprop_step(st, np.zeros(1), g, 0.01)
    assert upd[0] == pytest.approx(0.01 * 2.5 / math.sqrt(0.1 * 6.25 + 1e-8), rel=1e-14)
    st = OptimizerState.zeros(1)
    x = np.zeros(1)
    for _ in range(300):
        prev = x
        x = rmsprop_step(st, x, np.array([-7.0]), 0.01)
    assert x[0] - prev[0] == pytest.approx(0.01, rel=1e-6)


def test_rmsprop_permutation_invariance():
    g = np.random.default_rng(3)
    perm = g.permutation(10)
    s1, s2 = OptimizerState.zeros(10), OptimizerState.zeros(10)
    x = g.normal(size=10)
    y = x[perm].copy()
    for _ in range(5):
        grad = g.normal(size=10)
        x = rmsprop_step(s1, x, grad, 0.05)
        y = rmsprop_step(s2, y, grad[perm], 0.05)
    assert np.array_equal(x[perm], y) and np.array_equal(s1.accumulator[perm], s2.accumulator)


def test_select_alpha_tie_break():
    assert select_alpha({1.1: -5.0, 1.5: -3.0, 1.9: -4.0}) == 1.5
    assert select_alpha({1.9: -3.0, 1.2: -3.0, 1.5: -4.0}) == 1.2


def test_train_config_validation():
    for bad in (dict(m_paths=0), dict(iterations=-1), dict(learning_rate=0.0), dict(l2_scale=-1.0),
                dict(on_divergence="ignore")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# --- training loop --------------------------------------------------------------

def test_zero_iterations_returns_initial_params():
    obs = toy_obs()
    cfg = TrainConfig(m_paths=4, n_steps=20, k_samples=20, iterations=0)
    res = train(obs, SPEC, cfg, "ou", horizon=2.0, model_overrides=dict(n_ref=5, embed_dim=4, head_width=8, head_depth=2))
    ref = init_params(small_config(), 0, data_drift_init(obs, "ou"))
    assert np.array_equal(res.params.values, ref.values)
    assert res.trace == [] and res.boundary.shape[1] == 1


def test_data_drift_init():
    obs = toy_obs()
    assert np.allclose(data_drift_init(obs, "ou")["mu"], obs.values.mean(axis=0))
    assert data_drift_init(obs, "double_well") == {}


def test_divergence_policy(monkeypatch):
    from levy_tilt import training
    obs = toy_obs()
    real = training.elbo

    def flaky(*args, **kw):
        if kw["batch"] == 2:
            raise DivergenceError("all paths aborted")
        return real(*args, **kw)

    monkeypatch.setattr(training, "elbo", flaky)
    kw = dict(horizon=2.0, model_overrides=dict(n_ref=5, embed_dim=4, head_width=8, head_depth=2))
    cfg = TrainConfig(m_paths=4, n_steps=20, k_samples=20, iterations=5, learning_rate=1e-2)
    with pytest.raises(DivergenceError) as info:
        train(obs, SPEC, cfg, "ou", **kw)
    assert len(info.value.trace) == 2
    cfg.on_divergence = "stop"
    res = train(obs, SPEC, cfg, "ou", **kw)
    assert res.halted_at == 2 and len(res.trace) == 2
    two = train(obs, SPEC, TrainConfig(m_paths=4, n_steps=20, k_samples=20, iterations=2, learning_rate=1e-2), "ou", **kw)
    assert np.array_equal(res.params.values, two.params.values)


def test_train_trace_is_reproducible(tmp_path):
    obs = toy_obs()
    cfg = TrainConfig(m_paths=6, n_steps=30, k_samples=30, iterations=4, learning_rate=1e-2)
    kw = dict(horizon=2.0, model_overrides=dict(n_ref=5, embed_dim=4, head_width=8, head_depth=2))
    a, b = train(obs, SPEC, cfg, "ou", **kw), train(obs, SPEC, cfg, "ou", **kw)
    assert a.trace == b.trace and np.array_equal(a.params.values, b.params.values)
    assert len(a.trace) == 4
    write_trace(a.trace, tmp_path / "t.csv")
    back = read_trace(tmp_path / "t.csv")
    assert [r["elbo"] for r in back] == [r["elbo"] for r in a.trace]
    assert list(back[0]) == ["iter", "elbo", "loglik", "kl", "grad_norm"]


def test_alpha_grid_search():
    obs = toy_obs()
    cfg = TrainConfig(m_paths=4, n_steps=20, k_samples=20, iterations=2, alpha_grid=[1.7, 1.3])
    res = train(obs, SPEC, cfg, "ou", horizon=2.0,
                model_overrides=dict(n_ref=5, embed_dim=4, head_width=8, head_depth=2))
    assert set(res.alpha_scores) == {1.3, 1.7}
    assert res.spec.alpha == select_alpha(res.alpha_scores)


def test_smoothed():
    assert np.allclose(smoothed([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    assert np.allclose(smoothed([1, 2], 5), [1.5])


# --- Gaussian baseline ------------------------------------------------------------

def test_gaussian_kl_zero_correction():
    p = init_params(small_config("gaussian"), 0)
    gb = draw_noise(np.linspace(0, 2, 21), [0.0], 4, 0, 0)
    terms = replay_gaussian(p, torch.from_numpy(p.values.copy()), gb, None, 0.0)
    assert terms.kl.item() == 0.0


def test_gaussian_kl_riemann_sum():
    p = init_params(small_config("gaussian"), 0)
    p.values = p.values + 0.3 * np.random.default_rng(0).standard_normal(p.size)
    grid = np.linspace(0, 2, 21)
    terms = replay_gaussian(p, torch.from_numpy(p.values.copy()), draw_noise(grid, [0.0], 4, 0, 0), None, 0.0)
    with torch.no_grad():
        net = p.bind()
        u = net.correction(torch.from_numpy(grid[:-1])).numpy()[:, 0]
        sig = net.sigma().item()
    want = sum(0.5 * (u[j] / sig) ** 2 * (grid[j + 1] - grid[j]) for j in range(20))
    assert terms.kl.item() == pytest.approx(want, rel=1e-13)
    assert quadratic_kl(torch.zeros(3, 1), torch.ones(1), torch.ones(3)).item() == 0.0


def test_gaussian_elbo_gradient():
    obs = toy_obs()
    p = init_params(small_config("gaussian"), 0)
    p.values = p.values + 0.1 * np.random.default_rng(5).standard_normal(p.size)
    cfg = TrainConfig(m_paths=8, n_steps=40, k_samples=1, seed=2)
    r = gaussian_elbo(p, obs, cfg)
    def f(v):
        q = p.copy()
        q.values = v
        return gaussian_elbo(q, obs, cfg).value
    idx = np.random.default_rng(1).choice(p.size, 30, replace=False)
    fd = finite_difference_grad(f, p.values, idx, h=1e-5, order=4)
    assert np.max(np.abs(r.gradient[idx] - fd) / np.maximum(np.abs(fd), 1e-6 * np.abs(fd).max())) < 1e-4
