"""Monte Carlo checks of estimator behaviour against population theory."""

import math
from dataclasses import replace

import numpy as np
import pytest

from calm.cli import dgp_preset
from calm.estimators import theoretical_variance
from calm.predictor import SyntheticPredictorConfig
from calm.simharness import (
    DgpConfig,
    EstimatorSpec,
    generate_trial,
    run_monte_carlo,
    variance_reduction_report,
)


@pytest.fixture(scope="module")
def mc_null():
    cfg = replace(dgp_preset("null"), n=2000)
    specs = [EstimatorSpec("aipw", "aipw"), EstimatorSpec("calm", "calm-zero")]
    return cfg, run_monte_carlo(cfg, specs, 300, 5151)


class TestNoSignal:
    def test_unbiased(self, mc_null):
        _, m = mc_null
        assert abs(m["calm"].bias) < 3 * m["calm"].mc_se

    def test_spread_matches_aipw_theory(self, mc_null):
        cfg, m = mc_null
        tv = theoretical_variance(cfg)
        assert tv.v_calm == tv.v_aipw
        assert abs(m["calm"].sqrt_n_sd / math.sqrt(tv.v_aipw) - 1) < 0.10

    def test_aipw_coverage(self, mc_null):
        assert 0.92 <= mc_null[1]["aipw"].coverage <= 0.98


class TestDefaultLaw:
    def test_aipw_coverage_small_n(self, mc_coverage):
        assert 0.91 <= mc_coverage[400]["aipw-mu_t"].coverage <= 0.97

    def test_few_shot_coverage(self, mc_coverage):
        assert 0.92 <= mc_coverage[2000]["calm-fs-mu_t"].coverage <= 0.98

    def test_sd_ratio_matches_theory(self, mc_coverage):
        m = mc_coverage[2000]
        tv = theoretical_variance(DgpConfig(n=2000))
        ratio = m["calm-zero-mu_t"].sqrt_n_sd / m["aipw-mu_t"].sqrt_n_sd
        assert ratio < 1 and abs(ratio - math.sqrt(tv.v_calm / tv.v_aipw)) <= 0.1

    def test_ate_variance_not_above_aipw(self, mc_coverage):
        m = mc_coverage[2000]
        assert m["calm-zero-ate"].sd ** 2 <= 1.02 * m["aipw-ate"].sd ** 2

    def test_all_unbiased(self, mc_coverage):
        for n, metrics in mc_coverage.items():
            for name, m in metrics.items():
                assert abs(m.bias) < 3.5 * m.mc_se, (n, name)


def test_symmetric_arms_zero_effect():
    cfg = DgpConfig(n=400, tau=0.0, shared_beta=True)
    m = run_monte_carlo(cfg, EstimatorSpec("ate", "calm-zero", "ate", weight="ate"), 300, 5252)["ate"]
    assert m.truth == pytest.approx(0.0, abs=1e-12)
    assert abs(np.mean(m.estimates)) < 3 * m.mc_se


def test_calibration_term_is_centred():
    cfg = DgpConfig(n=500, predictor=SyntheticPredictorConfig(rho=0.8, delta=5.0, noise_sd=1.0))
    vals = []
    for r in range(300):
        trial = generate_trial(cfg, 53000 + r)
        ds = trial.dataset
        yd = trial.predictions.zero_shot_vector(ds.ids, 1)
        mud = cfg.mean(ds.x, 1) + 5.0
        a = (ds.t == 1) / ds.e(1)
        vals.append(np.mean((1 - a) * (yd - mud)))
    vals = np.array(vals)
    assert abs(vals.mean()) < 3 * vals.std(ddof=1) / math.sqrt(vals.size)


def test_spread_non_increasing_in_correlation():
    R = 200
    sds = []
    for rho in (0.0, 0.4, 0.8):
        cfg = DgpConfig(n=1000, predictor=SyntheticPredictorConfig(rho=rho, noise_sd=1.0))
        sds.append(run_monte_carlo(cfg, EstimatorSpec("calm", "calm-zero"), R, 5454)["calm"].sqrt_n_sd)
    tol = 2 / math.sqrt(2 * (R - 1))
    assert all(b <= a * (1 + tol) for a, b in zip(sds, sds[1:]))
    assert sds[2] < sds[0]


@pytest.fixture(scope="module")
def reduction_table():
    pc = SyntheticPredictorConfig(rho=0.8, noise_sd=1.0, rho_strata={1: 0.0, 2: 0.3, 3: 0.9, 4: 0.6})
    cfg = DgpConfig(n=2000, predictor=pc)
    return cfg, {row["stratum"]: row for row in variance_reduction_report(cfg, 300, 5555)}


class TestReductionReport:
    def test_no_signal_stratum(self, reduction_table):
        assert abs(reduction_table[1]["1"]["reduction_pct"]) < 10

    def test_ordering(self, reduction_table):
        t = reduction_table[1]
        assert t["3"]["reduction_pct"] > t["2"]["reduction_pct"]

    def test_global_reduction_matches_theory(self, reduction_table):
        cfg, t = reduction_table
        tv = theoretical_variance(cfg)
        assert abs(t["all"]["reduction_pct"] - 100 * (1 - tv.v_calm / tv.v_aipw)) <= 10
