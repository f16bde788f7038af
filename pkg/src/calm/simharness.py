"""Synthetic trial generator with known ground truth and a Monte Carlo harness."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.stats import norm

from .data import PropensitySpec, RctDataset, split_folds
from .errors import CalmError, DomainError, HarnessError
from .estimators import (
    estimate_ate_aipw,
    estimate_ate_calm,
    estimate_ate_calm_fs,
    estimate_mu_aipw,
    estimate_mu_calm,
    estimate_mu_calm_fs,
)
from .nuisance import RegressorConfig
from .predictor import (
    PredictionSet,
    SyntheticPredictor,
    SyntheticPredictorConfig,
    equal_probability_bins,
    mixing_coefficients,
)

__all__ = [
    "DgpConfig",
    "Truth",
    "Trial",
    "EstimatorSpec",
    "McMetrics",
    "generate_trial",
    "run_monte_carlo",
    "variance_reduction_report",
    "metrics_to_csv",
    "INTEGRATION_DRAWS",
]

log = logging.getLogger(__name__)

INTEGRATION_DRAWS = 10**6
FAILURE_LIMIT = 0.05


@dataclass(frozen=True)
class DgpConfig:
    """Two-arm outcome law with a latent signal visible only to predictors.

    ``Y(t) = x'beta_t + tau*1{t=1} + tau1*x1*1{t=1} + curvature*(x1^2 - 1)
    + theta_t*g + sigma_y*eps_t`` with ``x ~ N(0, I_p)``, ``g, eps ~ N(0, 1)``.
    Arm 1 is assigned with probability ``propensity``.

    ``beta="sphere"`` draws each ``beta_t`` uniformly on the unit sphere from
    ``beta_seed`` (shared across arms when ``shared_beta``); ``beta="zero"``
    gives constant conditional means; a tuple of two vectors fixes them.
    """

    n: int = 2000
    p: int = 2
    propensity: float = 0.5
    tau: float = 1.0
    tau1: float = 0.0
    curvature: float = 0.0
    theta: tuple = (1.0, 1.0)
    sigma_y: float = 0.4
    beta: object = "sphere"
    beta_seed: int = 0
    shared_beta: bool = False
    n_strata: int = 4
    predictor: SyntheticPredictorConfig = field(
        default_factory=lambda: SyntheticPredictorConfig(rho=0.8, noise_sd=1.0, demo_sd=0.5)
    )

    def __post_init__(self):
        if self.sigma_y <= 0:
            raise DomainError("sigma_y must be positive")
        if not 0.01 <= self.propensity <= 0.99:
            raise DomainError("propensity violates overlap")
        if self.n < 4 or self.p < 1:
            raise DomainError("need n >= 4 and p >= 1")
        if isinstance(self.beta, (list, tuple)):
            object.__setattr__(self, "beta", tuple(tuple(float(v) for v in b) for b in self.beta))

    # -- outcome law ---------------------------------------------------------

    @property
    def betas(self):
        return _betas(self.beta, self.beta_seed, self.p, self.shared_beta)

    def mean(self, x, arm):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = np.asarray(self.betas[arm - 1])
        out = x @ b + self.curvature * (x[:, 0] ** 2 - 1.0)
        if arm == 1:
            out = out + self.tau + self.tau1 * x[:, 0]
        return out

    def theta_of(self, arm):
        return float(self.theta[arm - 1])

    def cate(self, x):
        return self.mean(x, 1) - self.mean(x, 2)

    def propensity_spec(self):
        return PropensitySpec(2, constant=(self.propensity, 1.0 - self.propensity))

    # -- population quantities ----------------------------------------------

    def sample_x(self, draws, seed=0):
        """Antithetic covariate draws for integration."""
        half = np.random.default_rng(np.random.SeedSequence([int(seed), 7])).standard_normal((draws // 2, self.p))
        return np.vstack([half, -half])

    def density(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.prod(norm.pdf(x), axis=1)

    def conditional_moments(self, x, predictor=None):
        """Conditional moments of outcomes and predictions given ``x``."""
        pc = predictor or self.predictor
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = x.shape[0]
        mom = {}
        a = {}
        th = {t: self.theta_of(t) for t in (1, 2)}
        for t in (1, 2):
            if pc.rho_strata:
                codes = equal_probability_bins(x[:, 0], len(pc.rho_strata))
                rho = np.array([float(pc.rho_strata[int(c)]) for c in codes])
            else:
                rho = np.full(m, pc.rho_for(t))
            at = np.empty(m)
            bt = np.empty(m)
            for r in np.unique(rho):
                s = rho == r
                at[s], bt[s] = mixing_coefficients(float(r), th[t], self.sigma_y, pc.noise_sd)
            a[t] = at
            mom[f"mu{t}"] = self.mean(x, t)
            mom[f"var{t}"] = np.full(m, th[t] ** 2 + self.sigma_y**2)
            mom[f"vard{t}"] = at**2 * th[t] ** 2 + bt**2
            mom[f"cov{t}"] = at * th[t] ** 2
            mom[f"e{t}"] = np.full(m, self.propensity if t == 1 else 1.0 - self.propensity)
        mom["cross1"] = a[1] * th[1] * th[2]
        mom["cross2"] = a[2] * th[2] * th[1]
        mom["covd"] = a[1] * a[2] * th[1] * th[2]
        return mom

    def to_dict(self):
        d = asdict(self)
        d["betas"] = [list(b) for b in self.betas]
        d["predictor"] = {
            k: (dict(v) if isinstance(v, dict) else v) for k, v in asdict(self.predictor).items()
        }
        if d["predictor"].get("rho_strata"):
            d["predictor"]["rho_strata"] = {str(k): v for k, v in d["predictor"]["rho_strata"].items()}
        return d


def _betas(beta, beta_seed, p, shared):
    if isinstance(beta, tuple):
        return tuple(tuple(b) for b in beta)
    if beta == "zero":
        return (tuple([0.0] * p), tuple([0.0] * p))
    if beta != "sphere":
        raise DomainError(f"unknown beta rule {beta!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(beta_seed), 11]))
    draws = rng.standard_normal((2, p))
    draws /= np.linalg.norm(draws, axis=1, keepdims=True)
    if shared:
        draws[1] = draws[0]
    return (tuple(draws[0].tolist()), tuple(draws[1].tolist()))


class _Model:
    """Adapter exposing the outcome law to the synthetic predictor."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.sigma_y = cfg.sigma_y

    def mean(self, x, arm):
        return self.cfg.mean(x, arm)

    def theta(self, arm):
        return self.cfg.theta_of(arm)


@dataclass(frozen=True)
class Truth:
    """Population targets of a configuration."""

    mu: tuple
    ate: float
    betas: tuple

    def target(self, estimand, arm=1, arms=(1, 2)):
        if estimand == "mu_t":
            return self.mu[arm - 1]
        return self.mu[arms[0] - 1] - self.mu[arms[1] - 1]


def _truth_key(cfg):
    return (cfg.p, cfg.tau, cfg.tau1, cfg.curvature, cfg.betas)


@lru_cache(maxsize=64)
def _population(key, draws, seed):
    p, tau, tau1, curvature, betas = key
    cfg = DgpConfig(p=p, tau=tau, tau1=tau1, curvature=curvature, beta=betas)
    x = cfg.sample_x(draws, seed)
    return tuple(float(np.mean(cfg.mean(x, t))) for t in (1, 2))


def population_truth(cfg, draws=INTEGRATION_DRAWS, seed=0):
    """Arm means and ATE by antithetic Monte Carlo integration."""
    mu = _population(_truth_key(cfg), int(draws), int(seed))
    return Truth(mu, mu[0] - mu[1], cfg.betas)


@dataclass
class Trial:
    """One simulated experiment. Estimators see only ``dataset`` and ``predictions``."""

    dataset: RctDataset
    predictions: PredictionSet
    predictor: SyntheticPredictor
    truth: Truth
    potential: np.ndarray = field(repr=False)


def generate_trial(config, seed):
    """Draw a trial: covariates, latent signal, assignment, outcomes and predictions."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    n, p = config.n, config.p
    x = rng.standard_normal((n, p))
    g = rng.standard_normal(n)
    eps = rng.standard_normal((n, 2))
    t = np.where(rng.random(n) < config.propensity, 1, 2)
    pot = np.column_stack(
        [config.mean(x, a) + config.theta_of(a) * g + config.sigma_y * eps[:, a - 1] for a in (1, 2)]
    )
    y = pot[np.arange(n), t - 1]
    z = tuple(repr(float(v)) for v in g)
    ds = RctDataset(
        ids=tuple(f"s{i}" for i in range(n)),
        y=y,
        t=t,
        x=x,
        propensity=config.propensity_spec(),
        x_coarse=equal_probability_bins(x[:, 0], config.n_strata),
        z=z,
    )
    predictor = SyntheticPredictor(_Model(config), config.predictor)
    ps = PredictionSet()
    for arm in (1, 2):
        ps.set_zero_shot(ds.ids, arm, predictor.predict_batch(ds.ids, ds.x, ds.z, arm))
    return Trial(ds, ps, predictor, population_truth(config), pot)


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator configuration evaluated in every replication.

    ``family`` is ``"aipw"``, ``"calm-zero"`` or ``"calm-fs"``; ``estimand``
    is ``"mu_t"`` (for ``arm``) or ``"ate"`` (for ``arms``).
    """

    name: str
    family: str
    estimand: str = "mu_t"
    arm: int = 1
    arms: tuple = (1, 2)
    weight: str = "smooth"
    folds: int = 2
    m: int = 10
    B: int = 200
    alpha: float = 0.05
    config: RegressorConfig = field(default_factory=RegressorConfig)
    robust_source: str = "eval"

    def __post_init__(self):
        if self.family not in ("aipw", "calm-zero", "calm-fs"):
            raise DomainError(f"unknown estimator family {self.family!r}")
        if self.estimand not in ("mu_t", "ate"):
            raise DomainError(f"unknown estimand {self.estimand!r}")

    def run(self, trial, seed):
        ds, ps = trial.dataset, trial.predictions
        cfg = self.config
        if self.family == "calm-fs":
            fn = estimate_mu_calm_fs if self.estimand == "mu_t" else estimate_ate_calm_fs
            target = self.arm if self.estimand == "mu_t" else self.arms
            w = self.weight if not (self.estimand == "mu_t" and self.weight == "ate") else "smooth"
            return fn(ds, trial.predictor, target, self.m, self.B, w, cfg, self.alpha,
                      fold_seed=seed, robust_source=self.robust_source)
        folds = split_folds(ds.n, self.folds, seed)
        if self.family == "aipw":
            if self.estimand == "mu_t":
                return estimate_mu_aipw(ds, folds, self.arm, cfg, self.alpha)
            return estimate_ate_aipw(ds, folds, self.arms, cfg, self.alpha)
        if self.estimand == "mu_t":
            return estimate_mu_calm(ds, folds, ps, self.arm, self.weight, cfg, self.alpha, self.robust_source)
        return estimate_ate_calm(ds, folds, ps, self.arms, self.weight, cfg, self.alpha, self.robust_source)

    def to_dict(self):
        d = asdict(self)
        d["config"] = self.config.to_dict()
        d["arms"] = list(self.arms)
        return d


@dataclass
class McMetrics:
    """Monte Carlo summary for one estimator."""

    name: str
    R: int
    n: int
    truth: float
    estimates: np.ndarray
    ses: np.ndarray
    covered: np.ndarray
    widths: np.ndarray
    failures: int = 0

    @property
    def replications(self):
        return int(self.estimates.size)

    @property
    def bias(self):
        return float(np.mean(self.estimates) - self.truth)

    @property
    def abs_bias(self):
        return abs(self.bias)

    @property
    def sd(self):
        return float(np.std(self.estimates, ddof=1))

    @property
    def mc_se(self):
        return self.sd / math.sqrt(self.replications)

    @property
    def sqrt_n_sd(self):
        return math.sqrt(self.n) * self.sd

    @property
    def coverage(self):
        return float(np.mean(self.covered))

    @property
    def coverage_se(self):
        c = self.coverage
        return math.sqrt(c * (1 - c) / self.replications)

    @property
    def mean_ci_width(self):
        return float(np.mean(self.widths))

    def summary(self):
        return {
            "name": self.name,
            "R": self.R,
            "replications": self.replications,
            "failures": self.failures,
            "n": self.n,
            "truth": self.truth,
            "bias": self.bias,
            "abs_bias": self.abs_bias,
            "mc_se": self.mc_se,
            "sqrt_n_sd": self.sqrt_n_sd,
            "coverage": self.coverage,
            "coverage_se": self.coverage_se,
            "mean_ci_width": self.mean_ci_width,
        }

    def to_dict(self):
        d = self.summary()
        d["estimates"] = [float(v) for v in self.estimates]
        return d


def _replication_seeds(base_seed, R):
    children = np.random.SeedSequence(int(base_seed)).spawn(R)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def _one_replication(args):
    dgp, specs, seed = args
    trial = generate_trial(dgp, seed)
    out = []
    for spec in specs:
        try:
            rep = spec.run(trial, seed)
            out.append((rep.point, rep.se, rep.ci[0], rep.ci[1], None))
        except (CalmError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out.append((math.nan, math.nan, math.nan, math.nan, f"{type(exc).__name__}: {exc}"))
    return out


def run_monte_carlo(dgp, specs, R, base_seed, threads=1):
    """Evaluate estimators on ``R`` independent trials.

    Replication seeds are spawned from ``base_seed``; results are gathered in
    replication order, so output does not depend on ``threads``.

    Returns
    -------
    dict
        Estimator name to :class:`McMetrics`.
    """
    if R < 2:
        raise DomainError("need R >= 2")
    if isinstance(specs, EstimatorSpec):
        specs = [specs]
    specs = list(specs)
    seeds = _replication_seeds(base_seed, R)
    jobs = [(dgp, specs, s) for s in seeds]
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_one_replication, jobs, chunksize=max(1, R // (4 * threads))))
    else:
        rows = [_one_replication(j) for j in jobs]
    truth = population_truth(dgp)
    result = {}
    for j, spec in enumerate(specs):
        vals = np.array([r[j][:4] for r in rows], dtype=float)
        errs = [r[j][4] for r in rows if r[j][4] is not None]
        if len(errs) > FAILURE_LIMIT * R:
            raise HarnessError(f"{spec.name}: {len(errs)} of {R} replications failed; first: {errs[0]}")
        for e in errs[:3]:
            log.warning("%s replication failed: %s", spec.name, e)
        ok = ~np.isnan(vals[:, 0])
        target = truth.target(spec.estimand, spec.arm, spec.arms)
        v = vals[ok]
        result[spec.name] = McMetrics(
            spec.name, R, dgp.n, target, v[:, 0], v[:, 1], (v[:, 2] <= target) & (target <= v[:, 3]),
            v[:, 3] - v[:, 2], len(errs),
        )
    return result


def metrics_to_csv(metrics):
    """One CSV row per estimator with the summary columns."""
    buf = io.StringIO()
    cols = list(next(iter(metrics.values())).summary().keys())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for m in metrics.values():
        s = m.summary()
        w.writerow([repr(s[c]) if isinstance(s[c], float) else s[c] for c in cols])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# per-stratum variance reduction


def _reduction_replication(args):
    dgp, seed, arm, weight, config, folds_k = args
    trial = generate_trial(dgp, seed)
    ds = trial.dataset
    folds = split_folds(ds.n, folds_k, seed)
    calm = estimate_mu_calm(ds, folds, trial.predictions, arm, weight, config)
    aipw = estimate_mu_aipw(ds, folds, arm, config)
    codes = ds.x_coarse
    rows = {}
    for c in np.unique(codes):
        sel = codes == c
        w = [calm.diagnostics[k].get(str(int(c))) for k in calm.diagnostics if k.startswith("robust_weights")]
        w = [v for v in w if v is not None]
        rows[int(c)] = (
            float(calm.influence[sel].mean()),
            float(aipw.influence[sel].mean()),
            float(np.mean(w)) if w else math.nan,
        )
    return rows, calm.point, aipw.point


def variance_reduction_report(dgp, R, base_seed, arm=1, weight="robust", config=None, folds=2, threads=1):
    """Per-stratum percent variance reduction of CALM relative to AIPW.

    Strata are the dataset's ``x_coarse`` codes. Within a stratum the
    subgroup mean is estimated by the average influence value; the reduction
    is ``100 * (V_aipw - V_calm) / V_aipw`` across replications. The last row
    (``stratum="all"``) is the whole-sample estimate.
    """
    seeds = _replication_seeds(base_seed, R)
    jobs = [(dgp, s, arm, weight, config, folds) for s in seeds]
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(_reduction_replication, jobs))
    else:
        out = [_reduction_replication(j) for j in jobs]
    table = []
    for c in range(1, dgp.n_strata + 1):
        vals = np.array([r[0][c] for r in out if c in r[0]])
        if vals.shape[0] < 2:
            table.append({"stratum": str(c), "note": "empty stratum omitted"})
            continue
        v_c, v_a = np.var(vals[:, 0], ddof=1), np.var(vals[:, 1], ddof=1)
        table.append({
            "stratum": str(c),
            "replications": int(vals.shape[0]),
            "mean_omega": float(np.nanmean(vals[:, 2])) if np.any(~np.isnan(vals[:, 2])) else None,
            "var_calm": float(v_c),
            "var_aipw": float(v_a),
            "reduction_pct": float(100.0 * (v_a - v_c) / v_a),
        })
    pc = np.array([r[1] for r in out])
    pa = np.array([r[2] for r in out])
    v_c, v_a = np.var(pc, ddof=1), np.var(pa, ddof=1)
    table.append({
        "stratum": "all",
        "replications": R,
        "mean_omega": None,
        "var_calm": float(v_c),
        "var_aipw": float(v_a),
        "reduction_pct": float(100.0 * (v_a - v_c) / v_a),
    })
    return table
