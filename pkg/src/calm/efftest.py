"""Sup-type test that the conditional covariance of outcome and prediction is zero."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, OutOfSupportError
from .nuisance import RegressorConfig, _as_2d, fit_conditional_mean

__all__ = [
    "EffTestReport",
    "kernel_gamma",
    "plugin_psi",
    "sup_test",
    "simulate_sup",
    "critical_value",
    "efftest_bandwidth",
    "psi_correlation",
    "DENSITY_FLOOR",
]

log = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-3
_SQRT_2PI = math.sqrt(2 * math.pi)


def _k(u, kernel):
    if kernel == "gaussian":
        return np.exp(-0.5 * u * u) / _SQRT_2PI
    if kernel == "epanechnikov":
        return 0.75 * np.clip(1.0 - u * u, 0.0, None)
    raise DomainError(f"unknown kernel {kernel!r}")


def efftest_bandwidth(x, undersmooth=0.1):
    """Rule of thumb ``1.06 sd n^(-1/5)`` times the undersmoothing factor ``n^(-undersmooth)``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    return 1.06 * float(np.std(x, ddof=1)) * n ** (-0.2) * n ** (-undersmooth)


def _weights(x, grid, h, kernel):
    """Kernel matrix of shape (M, n) for a 1-D index coordinate."""
    k = _k((x[None, :] - np.asarray(grid, dtype=float)[:, None]) / h, kernel)
    mass = k.sum(axis=1)
    bad = np.flatnonzero(~(mass > 0))
    if bad.size:
        raise OutOfSupportError(f"no kernel mass at grid point {float(np.asarray(grid)[bad[0]])}")
    return k


def plugin_psi(x, y, y_dagger, grid, h, kernel="gaussian"):
    """Plug-in influence matrix ``psi[j, i]`` at grid point ``j`` for subject ``i``.

    Conditional means inside ``psi`` are Nadaraya-Watson fits with the same
    kernel and bandwidth. The density estimate is floored at
    ``DENSITY_FLOOR`` times its maximum over the grid.

    Returns
    -------
    (psi, f_hat)
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    yd = np.asarray(y_dagger, dtype=float)
    n = x.size
    kg = _weights(x, grid, h, kernel)
    f = kg.sum(axis=1) / (n * h)
    f = np.maximum(f, DENSITY_FLOOR * f.max())
    kx = _k((x[None, :] - x[:, None]) / h, kernel)
    kx /= kx.sum(axis=1, keepdims=True)
    mu, mud = kx @ y, kx @ yd
    core = y * yd - mu * yd - mud * y + mu * mud
    return kg / f[:, None] * core[None, :], f


def kernel_gamma(x, y, y_dagger, grid, h, kernel="gaussian"):
    """Kernel conditional covariance and its plug-in standard deviation on ``grid``.

    ``gamma_hat(x0)`` is the kernel-weighted covariance of ``y`` and
    ``y_dagger``. ``sigma_hat(x0)`` is the root of the plug-in variance of
    ``sqrt(n h) * gamma_hat(x0)``.

    Returns
    -------
    (gamma_hat, sigma_hat) : arrays of length ``len(grid)``
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    yd = np.asarray(y_dagger, dtype=float)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if x.size < 10:
        raise DomainError("need at least 10 subjects in the tested arm")
    w = _weights(x, grid, h, kernel)
    w = w / w.sum(axis=1, keepdims=True)
    gamma = w @ (y * yd) - (w @ y) * (w @ yd)
    psi, _ = plugin_psi(x, y, yd, grid, h, kernel)
    sigma = np.sqrt(np.mean(psi * psi, axis=1) / h)
    return gamma, sigma


def psi_correlation(psi, n_t, h):
    """Correlation matrix of the plug-in process from ``psi psi' / (n_t h)``.

    Rows with zero variance are left uncorrelated with unit diagonal.
    """
    cov = psi @ psi.T / (n_t * h)
    sd = np.sqrt(np.diag(cov))
    corr = np.eye(psi.shape[0])
    lv = np.flatnonzero(sd > 0)
    corr[np.ix_(lv, lv)] = cov[np.ix_(lv, lv)] / np.outer(sd[lv], sd[lv])
    corr[lv, lv] = 1.0
    return corr


def critical_value(sup_draws, alpha):
    """Order statistic ``S_(k)`` with ``k = floor((1 - alpha) n) + 1``."""
    s = np.sort(np.asarray(sup_draws, dtype=float))
    k = int(math.floor((1.0 - alpha) * s.size)) + 1
    return float(s[min(k, s.size) - 1])


def simulate_sup(corr, n_sim, rng):
    """Draws of ``max_j |G_j|`` for ``G ~ N(0, corr)``.

    Negative eigenvalues are clipped to zero with a logged warning.
    """
    corr = np.asarray(corr, dtype=float)
    vals, vecs = np.linalg.eigh((corr + corr.T) / 2)
    if vals.min() < -1e-10 * max(1.0, vals.max()):
        log.warning("correlation matrix not PSD (min eigenvalue %.3g); clipping", vals.min())
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    g = rng.standard_normal((n_sim, corr.shape[0])) @ root.T
    return np.abs(g).max(axis=1)


@dataclass
class EffTestReport:
    """Result of the sup test on a grid."""

    grid: np.ndarray
    gamma_hat: np.ndarray
    sigma_hat: np.ndarray
    t_stat: float
    critical_value: float
    p_value: float
    n_sim: int
    bandwidth: float
    alpha: float
    engine: str = "gaussian"
    config: dict = field(default_factory=dict)

    @property
    def reject(self):
        return self.t_stat > self.critical_value

    def to_dict(self):
        return {
            "grid": [float(v) for v in self.grid],
            "gamma_hat": [float(v) for v in self.gamma_hat],
            "sigma_hat": [float(v) for v in self.sigma_hat],
            "t_stat": float(self.t_stat),
            "critical_value": float(self.critical_value),
            "p_value": float(self.p_value),
            "reject": bool(self.reject),
            "n_sim": int(self.n_sim),
            "bandwidth": float(self.bandwidth),
            "alpha": float(self.alpha),
            "engine": self.engine,
            "config": self.config,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def sup_test(
    dataset,
    y_dagger,
    arm,
    grid=None,
    h=None,
    alpha=0.05,
    n_sim=5000,
    seed=0,
    coordinate=0,
    kernel="gaussian",
    engine="gaussian",
    config=None,
):
    """Test ``H0: Cov(Y, Y†(t) | T=t, X=x) = 0`` for all ``x``.

    Parameters
    ----------
    dataset : RctDataset
    y_dagger : array_like
        Predictions for ``arm`` aligned with ``dataset``.
    grid : array_like, optional
        Points of the index coordinate; defaults to its 5%..95% quantiles (20 points).
    coordinate : int
        Covariate column used as the index. With more than one covariate,
        outcome and prediction are first residualised on all covariates.
    engine : {"gaussian", "multiplier"}
        Gaussian simulation from the estimated correlation matrix, or a
        Gaussian multiplier bootstrap of the plug-in influence values.
    """
    if n_sim < 1000:
        raise DomainError("n_sim must be at least 1000")
    if engine not in ("gaussian", "multiplier"):
        raise DomainError(f"unknown engine {engine!r}")
    sel = np.flatnonzero(dataset.t == arm)
    xs = dataset.x[sel]
    y = dataset.y[sel]
    yd = np.asarray(y_dagger, dtype=float)[sel]
    if sel.size < 10:
        raise DomainError("need at least 10 subjects in the tested arm")
    if dataset.p > 1:
        cfg = config or RegressorConfig()
        y = y - fit_conditional_mean(xs, y, cfg)(xs)
        yd = yd - fit_conditional_mean(xs, yd, cfg)(xs)
    xi = xs[:, coordinate]
    if grid is None:
        grid = np.quantile(xi, np.linspace(0.05, 0.95, 20))
    grid = np.asarray(grid, dtype=float)
    if grid.size < 5:
        raise DomainError("grid needs at least 5 points")
    if h is None:
        h = efftest_bandwidth(xi)
    n_t = xi.size
    gamma, sigma = kernel_gamma(xi, y, yd, grid, h, kernel)
    psi, _ = plugin_psi(xi, y, yd, grid, h, kernel)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(sigma > 0, math.sqrt(n_t * h) * gamma / sigma, 0.0)
    t_stat = float(np.max(np.abs(tx)))
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    live = sigma > 0
    if engine == "gaussian":
        sims = simulate_sup(psi_correlation(psi, n_t, h), n_sim, rng)
    else:
        scaled = np.zeros_like(psi)
        scaled[live] = psi[live] / (sigma[live, None] * math.sqrt(n_t * h))
        sims = np.empty(n_sim)
        chunk = 500
        for start in range(0, n_sim, chunk):
            xi_w = rng.standard_normal((min(chunk, n_sim - start), n_t))
            sims[start : start + xi_w.shape[0]] = np.abs(xi_w @ scaled.T).max(axis=1)
    cv = critical_value(sims, alpha)
    p = float(np.count_nonzero(sims >= t_stat)) / n_sim
    return EffTestReport(
        grid, gamma, sigma, t_stat, cv, p, n_sim, float(h), alpha, engine,
        {"arm": arm, "coordinate": coordinate, "kernel": kernel, "seed": int(seed)},
    )
