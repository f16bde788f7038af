"""Influence functions and the CALM / AIPW estimators for arm means, ATE and CATE."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm

from .calibration import weight_ate, weight_robust, weight_smooth
from .data import split_folds
from .errors import DomainError, OutOfSupportError, UnstableQueryError
from .nuisance import RegressorConfig, _as_2d, fit_fold_arm, source_fold
from .predictor import PredictionSet, aggregate_few_shot

__all__ = [
    "EstimateReport",
    "OracleNuisance",
    "influence_zero_shot",
    "influence_aipw",
    "z_quantile",
    "estimate_mu_calm",
    "estimate_mu_aipw",
    "estimate_mu_calm_fs",
    "estimate_ate_calm",
    "estimate_ate_aipw",
    "estimate_ate_calm_fs",
    "estimate_cate_calm",
    "few_shot_predictions",
    "cate_bandwidth",
    "TheoreticalVariance",
    "theoretical_variance",
    "GAUSSIAN_K2",
    "EPANECHNIKOV_K2",
    "WEIGHT_KINDS",
    "MIN_EFFECTIVE_N",
]

WEIGHT_KINDS = ("smooth", "robust", "zero")
ATE_WEIGHT_KINDS = ("ate", "smooth", "robust", "zero")
GAUSSIAN_K2 = 1.0 / (2.0 * math.sqrt(math.pi))
EPANECHNIKOV_K2 = 0.6
MIN_EFFECTIVE_N = 10.0
FS_ROTATIONS = ((1, 2, 3), (2, 3, 1), (3, 1, 2))


def z_quantile(alpha):
    """Two-sided standard normal critical value ``z_{1 - alpha/2}``."""
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    return float(norm.ppf(1.0 - alpha / 2.0))


@dataclass
class EstimateReport:
    """Point estimate with variance, confidence interval and per-subject influence values.

    ``variance`` is the influence-function variance, so the standard error of
    ``point`` is ``sqrt(variance / n)`` for arm means and the ATE. For a CATE
    query the kernel weights are already normalised and ``variance`` is the
    squared standard error itself.
    """

    estimand: str
    point: float
    variance: float
    n: int
    ci: tuple
    alpha: float
    influence: np.ndarray = field(repr=False)
    config: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self):
        if self.estimand == "cate_at_x":
            return math.sqrt(self.variance)
        return math.sqrt(self.variance / self.n)

    def to_dict(self, include_influence=True):
        doc = {
            "estimand": self.estimand,
            "point": float(self.point),
            "variance": float(self.variance),
            "se": float(self.se),
            "n": int(self.n),
            "ci": [float(self.ci[0]), float(self.ci[1])],
            "alpha": float(self.alpha),
            "config": self.config,
            "diagnostics": self.diagnostics,
        }
        if include_influence:
            doc["influence"] = [float(v) for v in self.influence]
        return doc

    def to_json(self, include_influence=True):
        return json.dumps(self.to_dict(include_influence), sort_keys=True, indent=2)


def _check_finite(**arrays):
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise DomainError(f"non-finite values in {name}")


def influence_zero_shot(y, t_obs, y_dagger, arm, e_t, mu, mu_dagger, omega):
    """Calibrated-residual influence values.

    ``A*y + (1 - A)*(mu + omega*(y_dagger - mu_dagger))`` with
    ``A = 1{t_obs == arm} / e_t``. All arguments broadcast.
    """
    y, y_dagger, e_t, mu, mu_dagger, omega = (
        np.asarray(a, dtype=float) for a in (y, y_dagger, e_t, mu, mu_dagger, omega)
    )
    _check_finite(y=y, y_dagger=y_dagger, e_t=e_t, mu=mu, mu_dagger=mu_dagger, omega=omega)
    if np.any((e_t <= 0) | (e_t >= 1)):
        raise DomainError("propensity must lie in (0, 1)")
    a = (np.asarray(t_obs) == arm) / e_t
    return a * y + (1.0 - a) * (mu + omega * (y_dagger - mu_dagger))


def influence_aipw(y, t_obs, arm, e_t, mu):
    """AIPW influence values ``A*y + (1 - A)*mu``."""
    y, e_t, mu = (np.asarray(v, dtype=float) for v in (y, e_t, mu))
    _check_finite(y=y, e_t=e_t, mu=mu)
    if np.any((e_t <= 0) | (e_t >= 1)):
        raise DomainError("propensity must lie in (0, 1)")
    a = (np.asarray(t_obs) == arm) / e_t
    return a * y + (1.0 - a) * mu


def _fold_weighted_mean(values, folds):
    """Combine fold means with weights |I_l| / n."""
    n = len(values)
    total = 0.0
    for f in range(1, folds.K + 1):
        idx = folds.indices(f)
        if idx.size:
            total += idx.size / n * float(values[idx].mean())
    return total


def _report(estimand, phi, folds, alpha, config, diagnostics=None):
    n = len(phi)
    point = _fold_weighted_mean(phi, folds)
    var = float(np.mean((phi - point) ** 2))
    half = z_quantile(alpha) * math.sqrt(var / n)
    return EstimateReport(
        estimand, point, var, n, (point - half, point + half), alpha, phi, config, diagnostics or {}
    )


@dataclass(frozen=True)
class OracleNuisance:
    """Known nuisance functions injected in place of fitted ones."""

    mu: Callable
    mu_dagger: Callable
    omega: Callable


def _robust_weights_for_fold(ds, tr, ev, yd_tr, yd_ev, arm, part, codes, source):
    if source == "eval":
        idx, yd = ev, yd_ev
    else:
        idx, yd = tr, yd_tr
    x = ds.x[idx]
    return weight_robust(
        ds.y[idx], ds.t[idx], yd, codes[idx], part.mu_hat(x), part.mu_dagger_hat(x), ds.lam(arm)[idx], arm
    )


def _arm_influence(ds, folds, yd_for, arm, weight, config, robust_source="eval", codes=None):
    """Cross-fitted influence values for one arm.

    ``yd_for(eval_fold)`` returns the predictions ``(yd_train, yd_eval)`` for
    the training and evaluation folds paired with ``eval_fold``.
    """
    if weight not in WEIGHT_KINDS:
        raise DomainError(f"unknown weight kind {weight!r}")
    if weight == "robust" and codes is None:
        codes = ds.coarse_codes()
    phi = np.empty(ds.n)
    diag = {}
    for ev_fold in range(1, folds.K + 1):
        tr_fold = source_fold(ev_fold, folds.K)
        tr, ev = folds.indices(tr_fold), folds.indices(ev_fold)
        yd_tr, yd_ev = yd_for(ev_fold)
        part = fit_fold_arm(
            ds.x[tr], ds.y[tr], ds.t[tr], yd_tr, arm, config, tr_fold, second_moments=weight == "smooth"
        )
        xe = ds.x[ev]
        mu, mud = part.mu_hat(xe), part.mu_dagger_hat(xe)
        if weight == "smooth":
            omega = weight_smooth(part).evaluate(xe)
        elif weight == "robust":
            w = _robust_weights_for_fold(ds, tr, ev, yd_tr, yd_ev, arm, part, codes, robust_source)
            omega = w.evaluate(codes=codes[ev])
            diag[f"robust_weights_fold{ev_fold}"] = {str(c): v for c, v in sorted(w.robust.items())}
        else:
            omega = np.zeros(ev.size)
        phi[ev] = influence_zero_shot(ds.y[ev], ds.t[ev], yd_ev, arm, ds.e(arm)[ev], mu, mud, omega)
        diag[f"mean_omega_fold{ev_fold}"] = float(np.mean(omega)) if ev.size else 0.0
    return phi, diag


def _zero_shot_source(ds, folds, predictions, arm):
    if isinstance(predictions, PredictionSet):
        yd = predictions.zero_shot_vector(ds.ids, arm)
    else:
        yd = np.asarray(predictions, dtype=float)
        if yd.shape != (ds.n,):
            raise DomainError("prediction vector must align with the dataset")

    def yd_for(ev_fold):
        tr = folds.indices(source_fold(ev_fold, folds.K))
        return yd[tr], yd[folds.indices(ev_fold)]

    return yd_for


def _base_config(family, folds, weight, config, **extra):
    doc = {
        "estimator": family,
        "folds": folds.K,
        "fold_seed": folds.seed,
        "weight": weight,
        "regressor": (config or RegressorConfig()).to_dict(),
    }
    doc.update(extra)
    return doc


def estimate_mu_calm(
    dataset,
    folds,
    predictions,
    arm,
    weight="smooth",
    config=None,
    alpha=0.05,
    robust_source="eval",
    oracle=None,
):
    """Zero-shot CALM estimate of the arm-``arm`` mean outcome.

    Parameters
    ----------
    dataset : RctDataset
    folds : FoldAssignment
        Subjects in fold ``l`` are evaluated with nuisances fitted on its
        cyclic predecessor; with ``K=2`` the two folds swap roles.
    predictions : PredictionSet or array_like
        Zero-shot predictions for ``arm``.
    weight : {"smooth", "robust", "zero"}
    robust_source : {"eval", "train"}
        Sample on which robust stratum weights are estimated.
    oracle : OracleNuisance, optional
        Use known nuisance functions instead of fitting any.
    """
    if robust_source not in ("eval", "train"):
        raise DomainError("robust_source must be 'eval' or 'train'")
    yd_for = _zero_shot_source(dataset, folds, predictions, arm)
    if oracle is not None:
        yd = np.empty(dataset.n)
        for f in range(1, folds.K + 1):
            yd[folds.indices(f)] = yd_for(f)[1]
        x = dataset.x
        phi = influence_zero_shot(
            dataset.y, dataset.t, yd, arm, dataset.e(arm), oracle.mu(x), oracle.mu_dagger(x), oracle.omega(x)
        )
        cfg = _base_config("calm-oracle", folds, "oracle", config, arm=arm)
        return _report("mu_t", phi, folds, alpha, cfg)
    phi, diag = _arm_influence(dataset, folds, yd_for, arm, weight, config, robust_source)
    cfg = _base_config("calm-zero", folds, weight, config, arm=arm, robust_source=robust_source)
    return _report("mu_t", phi, folds, alpha, cfg, diag)


def estimate_mu_aipw(dataset, folds, arm, config=None, alpha=0.05):
    """Cross-fitted AIPW estimate of the arm-``arm`` mean outcome."""
    phi = _aipw_arm_influence(dataset, folds, arm, config)
    return _report("mu_t", phi, folds, alpha, _base_config("aipw", folds, "none", config, arm=arm))


def _aipw_arm_influence(ds, folds, arm, config):
    from .nuisance import fit_conditional_mean

    phi = np.empty(ds.n)
    for ev_fold in range(1, folds.K + 1):
        tr_fold = source_fold(ev_fold, folds.K)
        tr, ev = folds.indices(tr_fold), folds.indices(ev_fold)
        treated = tr[ds.t[tr] == arm]
        if treated.size < 2:
            raise DomainError(f"training fold {tr_fold} has fewer than 2 subjects in arm {arm}")
        mu = fit_conditional_mean(ds.x[treated], ds.y[treated], config)
        phi[ev] = influence_aipw(ds.y[ev], ds.t[ev], arm, ds.e(arm)[ev], mu(ds.x[ev]))
    return phi


# ---------------------------------------------------------------------------
# few-shot


def few_shot_predictions(dataset, folds, predictor, arm, m, B, seed):
    """Aggregated few-shot predictions for every rotation of a 3-fold split.

    For each rotation ``(donor, train, eval)`` the donor fold supplies the
    demonstrations and both other folds are queried.
    """
    if folds.K != 3:
        raise DomainError("few-shot estimation uses exactly three folds")
    ps = PredictionSet(m=m)
    for donor, tr, ev in FS_ROTATIONS:
        donors = dataset.subset(folds.indices(donor))
        queries = dataset.subset(np.concatenate([folds.indices(tr), folds.indices(ev)]))
        ps.merge(aggregate_few_shot(predictor, donors, queries, arm, m, B, seed, donor_fold=donor))
    return ps


def _few_shot_source(ds, folds, predictions, arm):
    def yd_for(ev_fold):
        donor, tr, ev = next(r for r in FS_ROTATIONS if r[2] == ev_fold)
        tr_ids = [ds.ids[i] for i in folds.indices(tr)]
        ev_ids = [ds.ids[i] for i in folds.indices(ev)]
        return (
            predictions.few_shot_mean(tr_ids, arm, donor),
            predictions.few_shot_mean(ev_ids, arm, donor),
        )

    return yd_for


def _resolve_fs(dataset, predictor, predictions, folds, arms, m, B, fold_seed, agg_seed):
    if folds is None:
        folds = split_folds(dataset.n, 3, fold_seed)
    if folds.K != 3:
        raise DomainError("few-shot estimation uses exactly three folds")
    if predictions is None:
        if predictor is None:
            raise DomainError("need a predictor or stored few-shot predictions")
        predictions = PredictionSet(m=m)
        for arm in arms:
            predictions.merge(few_shot_predictions(dataset, folds, predictor, arm, m, B, agg_seed))
    return folds, predictions


def estimate_mu_calm_fs(
    dataset,
    predictor,
    arm,
    m,
    B,
    weight="smooth",
    config=None,
    alpha=0.05,
    fold_seed=0,
    agg_seed=None,
    folds=None,
    predictions=None,
    robust_source="eval",
):
    """Few-shot CALM estimate of an arm mean over the three cyclic fold rotations.

    Either ``predictor`` (queried with ``B`` demonstration sets of size ``m``)
    or stored few-shot ``predictions`` must be given.
    """
    agg_seed = fold_seed if agg_seed is None else agg_seed
    folds, predictions = _resolve_fs(dataset, predictor, predictions, folds, [arm], m, B, fold_seed, agg_seed)
    yd_for = _few_shot_source(dataset, folds, predictions, arm)
    phi, diag = _arm_influence(dataset, folds, yd_for, arm, weight, config, robust_source)
    cfg = _base_config(
        "calm-fs", folds, weight, config, arm=arm, m=m, B=predictions.B, agg_seed=agg_seed,
        robust_source=robust_source,
    )
    return _report("mu_t", phi, folds, alpha, cfg, diag)


# ---------------------------------------------------------------------------
# ATE


def _ate_influence(ds, folds, yd_for_t, yd_for_tp, arms, weight, config, robust_source="eval"):
    t_arm, tp_arm = arms
    if weight not in ATE_WEIGHT_KINDS:
        raise DomainError(f"unknown weight kind {weight!r}")
    if weight != "ate":
        phi_t, d1 = _arm_influence(ds, folds, yd_for_t, t_arm, weight, config, robust_source)
        phi_tp, d2 = _arm_influence(ds, folds, yd_for_tp, tp_arm, weight, config, robust_source)
        return phi_t, phi_tp, {f"arm{t_arm}": d1, f"arm{tp_arm}": d2}
    phi_t = np.empty(ds.n)
    phi_tp = np.empty(ds.n)
    diag = {}
    for ev_fold in range(1, folds.K + 1):
        tr_fold = source_fold(ev_fold, folds.K)
        tr, ev = folds.indices(tr_fold), folds.indices(ev_fold)
        yt_tr, yt_ev = yd_for_t(ev_fold)
        ytp_tr, ytp_ev = yd_for_tp(ev_fold)
        pt = fit_fold_arm(ds.x[tr], ds.y[tr], ds.t[tr], yt_tr, t_arm, config, tr_fold, False)
        ptp = fit_fold_arm(ds.x[tr], ds.y[tr], ds.t[tr], ytp_tr, tp_arm, config, tr_fold, False)
        w = weight_ate(
            ds.x[tr], ds.y[tr], ds.t[tr], yt_tr, ytp_tr, ds.e(t_arm)[tr], ds.e(tp_arm)[tr], arms, config
        )
        xe = ds.x[ev]
        om = w.evaluate(xe)
        phi_t[ev] = influence_zero_shot(
            ds.y[ev], ds.t[ev], yt_ev, t_arm, ds.e(t_arm)[ev], pt.mu_hat(xe), pt.mu_dagger_hat(xe), om[:, 0]
        )
        phi_tp[ev] = influence_zero_shot(
            ds.y[ev], ds.t[ev], ytp_ev, tp_arm, ds.e(tp_arm)[ev], ptp.mu_hat(xe), ptp.mu_dagger_hat(xe), om[:, 1]
        )
        diag[f"mean_omega_fold{ev_fold}"] = [float(v) for v in om.mean(axis=0)] if ev.size else [0.0, 0.0]
    return phi_t, phi_tp, diag


def _check_arms(dataset, arms):
    t_arm, tp_arm = arms
    k = dataset.arm_count
    if t_arm == tp_arm or not (1 <= t_arm <= k and 1 <= tp_arm <= k):
        raise DomainError(f"invalid contrast {arms} for {k} arms")


def estimate_ate_calm(
    dataset, folds, predictions, arms, weight="ate", config=None, alpha=0.05, robust_source="eval"
):
    """Zero-shot CALM estimate of ``mu_t - mu_t'``.

    ``weight="ate"`` uses the joint two-arm weight; other kinds calibrate each
    arm separately.
    """
    _check_arms(dataset, arms)
    src_t = _zero_shot_source(dataset, folds, predictions, arms[0])
    src_tp = _zero_shot_source(dataset, folds, predictions, arms[1])
    phi_t, phi_tp, diag = _ate_influence(dataset, folds, src_t, src_tp, arms, weight, config, robust_source)
    cfg = _base_config("calm-zero", folds, weight, config, contrast=list(arms))
    return _report("ate", phi_t - phi_tp, folds, alpha, cfg, diag)


def estimate_ate_aipw(dataset, folds, arms, config=None, alpha=0.05):
    """Cross-fitted AIPW estimate of ``mu_t - mu_t'``."""
    _check_arms(dataset, arms)
    d = _aipw_arm_influence(dataset, folds, arms[0], config) - _aipw_arm_influence(
        dataset, folds, arms[1], config
    )
    return _report("ate", d, folds, alpha, _base_config("aipw", folds, "none", config, contrast=list(arms)))


def estimate_ate_calm_fs(
    dataset,
    predictor,
    arms,
    m,
    B,
    weight="ate",
    config=None,
    alpha=0.05,
    fold_seed=0,
    agg_seed=None,
    folds=None,
    predictions=None,
    robust_source="eval",
):
    """Few-shot CALM estimate of ``mu_t - mu_t'``."""
    _check_arms(dataset, arms)
    agg_seed = fold_seed if agg_seed is None else agg_seed
    folds, predictions = _resolve_fs(dataset, predictor, predictions, folds, list(arms), m, B, fold_seed, agg_seed)
    src_t = _few_shot_source(dataset, folds, predictions, arms[0])
    src_tp = _few_shot_source(dataset, folds, predictions, arms[1])
    phi_t, phi_tp, diag = _ate_influence(dataset, folds, src_t, src_tp, arms, weight, config, robust_source)
    cfg = _base_config("calm-fs", folds, weight, config, contrast=list(arms), m=m, B=predictions.B, agg_seed=agg_seed)
    return _report("ate", phi_t - phi_tp, folds, alpha, cfg, diag)


# ---------------------------------------------------------------------------
# CATE


def cate_bandwidth(x, undersmooth=0.05):
    """Per-coordinate rule-of-thumb bandwidth ``1.06 sd n^(-1/(p+4)) n^(-undersmooth)``."""
    x = _as_2d(x)
    n, p = x.shape
    return 1.06 * x.std(axis=0, ddof=1) * n ** (-1.0 / (p + 4)) * n ** (-undersmooth)


def _kernel(u, kind):
    if kind == "gaussian":
        return np.exp(-0.5 * (u**2).sum(axis=-1))
    if kind == "epanechnikov":
        return np.prod(np.clip(1.0 - u**2, 0.0, None), axis=-1)
    raise DomainError(f"unknown kernel {kind!r}")


def estimate_cate_calm(
    dataset,
    folds,
    predictions,
    arms,
    x_query,
    bandwidth=None,
    kernel="gaussian",
    weight="ate",
    config=None,
    alpha=0.05,
    influence=None,
):
    """Kernel-weighted CALM estimate of ``tau(x)`` at each query row.

    Parameters
    ----------
    bandwidth : float or array_like, optional
        Scalar or per-coordinate bandwidth; :func:`cate_bandwidth` when None.
    influence : array_like, optional
        Precomputed per-subject differences ``phi_t - phi_t'``; skips refitting.

    Returns
    -------
    list of EstimateReport
        One ``cate_at_x`` report per query row.
    """
    _check_arms(dataset, arms)
    if influence is None:
        influence = estimate_ate_calm(dataset, folds, predictions, arms, weight, config, alpha).influence
    d = np.asarray(influence, dtype=float)
    x = dataset.x
    h = cate_bandwidth(x) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, dtype=float), (x.shape[1],))
    if np.any(h <= 0):
        raise DomainError("bandwidth must be positive")
    z = z_quantile(alpha)
    reports = []
    for xq in _as_2d(np.atleast_1d(np.asarray(x_query, dtype=float)).reshape(-1, x.shape[1])):
        k = _kernel((x - xq) / h, kernel)
        mass = k.sum()
        if not mass > 0:
            raise OutOfSupportError(f"no kernel mass at x={xq.tolist()}")
        w = k / mass
        ess = 1.0 / float(np.sum(w**2))
        if ess < MIN_EFFECTIVE_N:
            raise UnstableQueryError(f"effective sample size {ess:.2f} below {MIN_EFFECTIVE_N} at x={xq.tolist()}")
        tau = float(w @ d)
        var = float(np.sum(w**2 * (d - tau) ** 2))
        half = z * math.sqrt(var)
        cfg = {
            "estimator": "calm-cate",
            "folds": folds.K,
            "fold_seed": folds.seed,
            "weight": weight,
            "kernel": kernel,
            "bandwidth": [float(v) for v in h],
            "contrast": list(arms),
            "x_query": xq.tolist(),
        }
        reports.append(
            EstimateReport("cate_at_x", tau, var, dataset.n, (tau - half, tau + half), alpha, w * d, cfg,
                           {"effective_n": ess})
        )
    return reports


# ---------------------------------------------------------------------------
# theory


@dataclass(frozen=True)
class TheoreticalVariance:
    """Asymptotic variances implied by known population moments.

    For ``mu_t`` the components are ``(E[(mu_t(X) - mu_t)^2], E[Var/e],
    reduction)``. For the ATE the third component is
    ``E[c' Sigma_V^-1 c]``. For a CATE query ``v_calm`` is
    ``K2 * V(x) / f_X(x)`` and ``v_aipw`` the same with no reduction.
    """

    v_aipw: float
    v_calm: float
    components: tuple
    density: Optional[float] = None
    kernel_k2: Optional[float] = None


def theoretical_variance(dgp, estimand="mu_t", arm=1, arms=(1, 2), x=None, kernel="gaussian", draws=10**6, seed=0):
    """Evaluate asymptotic variances by Monte Carlo integration over the covariate law.

    Parameters
    ----------
    dgp
        Object exposing ``sample_x(draws, seed)``,
        ``conditional_moments(x) -> dict`` and, for CATE, ``density(x)``.
        Moment keys: ``mu{t}``, ``var{t}``, ``vard{t}``, ``cov{t}`` (Y(t)
        with Y†(t)), ``covd`` (Y†(1) with Y†(2)), ``cross{t}`` (Y†(t) with
        the other arm's outcome) and ``e{t}``.
    estimand : {"mu_t", "ate", "cate"}
    """
    if estimand == "cate":
        xq = np.atleast_2d(np.asarray(x, dtype=float))
        mom = dgp.conditional_moments(xq)
        va, vc = _ate_terms(mom, arms)
        f = float(dgp.density(xq)[0])
        k2 = GAUSSIAN_K2 if kernel == "gaussian" else EPANECHNIKOV_K2
        return TheoreticalVariance(k2 * float(va[0]) / f, k2 * float(vc[0]) / f, (float(va[0]), float(va[0] - vc[0])), f, k2)
    xs = dgp.sample_x(draws, seed)
    mom = dgp.conditional_moments(xs)
    if estimand == "mu_t":
        mu, var, vard, cov, e = (mom[f"{k}{arm}"] for k in ("mu", "var", "vard", "cov", "e"))
        spread = float(np.mean((mu - mu.mean()) ** 2))
        base = float(np.mean(var / e))
        with np.errstate(divide="ignore", invalid="ignore"):
            rho2 = np.where((var > 0) & (vard > 0), cov**2 / (var * vard), 0.0)
        red = float(np.mean((1 - e) / e * var * rho2))
        return TheoreticalVariance(spread + base, spread + base - red, (spread, base, red))
    if estimand == "ate":
        t, tp = arms
        tau_x = mom[f"mu{t}"] - mom[f"mu{tp}"]
        spread = float(np.mean((tau_x - tau_x.mean()) ** 2))
        va, vc = _ate_terms(mom, arms)
        return TheoreticalVariance(
            spread + float(np.mean(va)), spread + float(np.mean(vc)), (spread, float(np.mean(va)), float(np.mean(va - vc)))
        )
    raise DomainError(f"unknown estimand {estimand!r}")


def _ate_terms(mom, arms):
    """Pointwise AIPW and CALM conditional variance terms for the contrast."""
    t, tp = arms
    e1, e2 = mom[f"e{t}"], mom[f"e{tp}"]
    base = mom[f"var{t}"] / e1 + mom[f"var{tp}"] / e2
    s1, s2 = np.sqrt(1 / e1 - 1), np.sqrt(1 / e2 - 1)
    sigma = np.empty(base.shape + (2, 2))
    sigma[..., 0, 0] = s1 * s1 * mom[f"vard{t}"]
    sigma[..., 1, 1] = s2 * s2 * mom[f"vard{tp}"]
    sigma[..., 0, 1] = sigma[..., 1, 0] = s1 * s2 * mom["covd"]
    c = np.empty(base.shape + (2,))
    c[..., 0] = s1 * (s1 * mom[f"cov{t}"] + s2 * mom[f"cross{t}"])
    c[..., 1] = s2 * (s2 * mom[f"cov{tp}"] + s1 * mom[f"cross{tp}"])
    red = np.zeros(base.shape)
    det = sigma[..., 0, 0] * sigma[..., 1, 1] - sigma[..., 0, 1] ** 2
    ok = det > 1e-300
    inv00 = np.where(ok, sigma[..., 1, 1], 0) / np.where(ok, det, 1)
    inv11 = np.where(ok, sigma[..., 0, 0], 0) / np.where(ok, det, 1)
    inv01 = np.where(ok, -sigma[..., 0, 1], 0) / np.where(ok, det, 1)
    red = c[..., 0] ** 2 * inv00 + 2 * c[..., 0] * c[..., 1] * inv01 + c[..., 1] ** 2 * inv11
    # singular Sigma_V: fall back to whichever single component is identified
    single = ~ok
    if np.any(single):
        r1 = np.where(sigma[..., 0, 0] > 0, c[..., 0] ** 2 / np.where(sigma[..., 0, 0] > 0, sigma[..., 0, 0], 1), 0)
        r2 = np.where(sigma[..., 1, 1] > 0, c[..., 1] ** 2 / np.where(sigma[..., 1, 1] > 0, sigma[..., 1, 1], 1), 0)
        red = np.where(single, np.maximum(r1, r2), red)
    return base, base - red
