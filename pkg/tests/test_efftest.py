import logging

import numpy as np
import pytest

from calm.efftest import (
    critical_value,
    efftest_bandwidth,
    kernel_gamma,
    plugin_psi,
    psi_correlation,
    simulate_sup,
    sup_test,
)
from calm.errors import DomainError, OutOfSupportError
from calm.simharness import DgpConfig, generate_trial

from conftest import make_dataset


def _one_d(n, rng, rho):
    x = rng.standard_normal(n)
    y = rng.standard_normal(n)
    yd = rho * y + np.sqrt(1 - rho**2) * rng.standard_normal(n)
    return x, y, yd


class TestKernelGamma:
    def test_constant_prediction(self):
        rng = np.random.default_rng(0)
        x, y, _ = _one_d(300, rng, 0.0)
        gamma, _ = kernel_gamma(x, y, np.full(300, 2.5), np.linspace(-1, 1, 7), 0.3)
        assert np.abs(gamma).max() < 1e-12

    def test_identity_prediction(self):
        rng = np.random.default_rng(1)
        x, y, _ = _one_d(5000, rng, 0.0)
        gamma, _ = kernel_gamma(x, y, y, [0.0], efftest_bandwidth(x))
        assert abs(gamma[0] - 1.0) < 0.15

    def test_flat_weights_give_sample_covariance(self):
        rng = np.random.default_rng(2)
        x, y, yd = _one_d(50, rng, 0.5)
        gamma, _ = kernel_gamma(x, y, yd, [0.0, 1.0], 1e8)
        brute = np.mean((y - y.mean()) * (yd - yd.mean()))
        assert np.allclose(gamma, brute, atol=1e-10, rtol=0)

    def test_out_of_support(self):
        x = np.linspace(0, 1, 20)
        with pytest.raises(OutOfSupportError):
            kernel_gamma(x, x, x, [5.0], 0.1, kernel="epanechnikov")

    def test_too_few(self):
        with pytest.raises(DomainError):
            kernel_gamma(np.arange(5.0), np.arange(5.0), np.arange(5.0), [1.0], 1.0)

    def test_sigma_matches_psi(self):
        rng = np.random.default_rng(3)
        x, y, yd = _one_d(400, rng, 0.3)
        grid = np.linspace(-1, 1, 5)
        _, sigma = kernel_gamma(x, y, yd, grid, 0.4)
        psi, f = plugin_psi(x, y, yd, grid, 0.4)
        assert np.allclose(sigma**2, np.mean(psi**2, axis=1) / 0.4)
        assert np.all(f > 0)

    def test_density_floor(self):
        x = np.concatenate([np.zeros(30), np.full(3, 10.0)])
        _, f = plugin_psi(x, np.arange(33.0), np.arange(33.0), [0.0, 5.0], 0.5)
        assert f[1] == pytest.approx(1e-3 * f[0])


class TestSimulation:
    def test_single_point_critical_value(self):
        sims = simulate_sup(np.eye(1), 200000, np.random.default_rng(4))
        assert abs(critical_value(sims, 0.05) - 1.96) < 0.03

    def test_order_statistic(self):
        draws = np.arange(1.0, 101.0)
        assert critical_value(draws, 0.05) == 96.0

    def test_non_psd_is_clipped(self, caplog):
        bad = np.array([[1.0, 0.99, -0.99], [0.99, 1.0, 0.99], [-0.99, 0.99, 1.0]])
        with caplog.at_level(logging.WARNING):
            sims = simulate_sup(bad, 1000, np.random.default_rng(5))
        assert np.all(np.isfinite(sims)) and "not PSD" in caplog.text

    def test_correlation_diagonal(self):
        rng = np.random.default_rng(6)
        psi = rng.standard_normal((8, 300)) * rng.uniform(0.1, 50, (8, 1))
        psi[3] = 0.0
        corr = psi_correlation(psi, 300, 0.2)
        assert np.abs(np.diag(corr) - 1).max() < 1e-10


def _dataset(n, rho, seed):
    rng = np.random.default_rng(seed)
    x, y, yd = _one_d(n, rng, rho)
    t = np.ones(n, int)
    t[: n // 10] = 2
    return make_dataset(y, t, x[:, None]), yd


class TestSupTest:
    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("engine", ["gaussian", "multiplier"])
    def test_decision_triple(self, seed, engine):
        ds, yd = _dataset(500, 0.15 * seed, seed)
        r = sup_test(ds, yd, 1, n_sim=1000, seed=seed, engine=engine)
        assert 0 <= r.p_value <= 1
        assert r.reject == (r.t_stat > r.critical_value) == (r.p_value < r.alpha)

    def test_scale_invariance(self):
        ds, yd = _dataset(600, 0.4, 7)
        a = sup_test(ds, yd, 1, n_sim=1000, seed=1)
        b = sup_test(ds, 3.7 * yd, 1, n_sim=1000, seed=1)
        za, zb = a.gamma_hat / a.sigma_hat, b.gamma_hat / b.sigma_hat
        assert np.abs(za - zb).max() < 1e-8 and abs(a.t_stat - b.t_stat) < 1e-8

    def test_strong_signal_rejects(self):
        ds, yd = _dataset(1000, 0.8, 8)
        assert sup_test(ds, yd, 1, seed=2).reject

    def test_defaults(self):
        ds, yd = _dataset(800, 0.0, 9)
        r = sup_test(ds, yd, 1, n_sim=1000)
        xs = ds.x[ds.t == 1, 0]
        assert r.grid.size == 20
        assert r.grid[0] == pytest.approx(np.quantile(xs, 0.05))
        assert r.bandwidth == pytest.approx(1.06 * xs.std(ddof=1) * xs.size ** -0.3)

    def test_deterministic(self):
        ds, yd = _dataset(400, 0.2, 10)
        assert sup_test(ds, yd, 1, n_sim=1000, seed=3).to_json() == sup_test(ds, yd, 1, n_sim=1000, seed=3).to_json()

    def test_engines_agree_roughly(self):
        ds, yd = _dataset(600, 0.0, 11)
        g = sup_test(ds, yd, 1, n_sim=4000, seed=4)
        m = sup_test(ds, yd, 1, n_sim=4000, seed=4, engine="multiplier")
        assert abs(g.critical_value - m.critical_value) < 0.25

    def test_multivariate_uses_coordinate(self):
        trial = generate_trial(DgpConfig(n=600), 12)
        yd = trial.predictions.zero_shot_vector(trial.dataset.ids, 1)
        r = sup_test(trial.dataset, yd, 1, n_sim=1000, coordinate=1)
        assert r.config["coordinate"] == 1 and r.reject

    @pytest.mark.parametrize("kw", [{"n_sim": 10}, {"grid": [0.0, 0.1]}, {"engine": "bootstrap"}])
    def test_bad_arguments(self, kw):
        ds, yd = _dataset(200, 0.0, 13)
        with pytest.raises(DomainError):
            sup_test(ds, yd, 1, **kw)
