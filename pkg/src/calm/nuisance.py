"""Regression smoothers and cross-fitted nuisance functions.

Every fitted smoother is an immutable callable mapping an ``(m, p)`` query
matrix to an ``(m,)`` vector, or ``(m, q)`` for multi-response fits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError

__all__ = [
    "RegressorConfig",
    "KnnSmoother",
    "KernelSmoother",
    "LinearSmoother",
    "StumpEnsemble",
    "ConstantSmoother",
    "fit_conditional_mean",
    "fit_conditional_second_moments",
    "SecondMoments",
    "FoldArmNuisance",
    "NuisanceBundle",
    "fit_fold_arm",
    "cross_fit",
    "source_fold",
]

FAMILIES = ("knn", "kernel_smoother", "stump_ensemble", "linear")
DEFAULT_K_GRID = (5, 10, 25, 50)
CV_FOLDS = 5


@dataclass(frozen=True)
class RegressorConfig:
    """Regression family and hyperparameters.

    Parameters
    ----------
    family : {"knn", "kernel_smoother", "stump_ensemble", "linear"}
    k : int, optional
        Neighbour count for ``knn`` when ``selection="fixed"``.
    selection : {"cross_validated", "fixed"}
        For ``knn``, pick ``k`` by 5-fold CV over ``k_grid`` plus ``sqrt(n)``.
    bandwidth : float, optional
        Kernel bandwidth on standardized coordinates; rule of thumb when None.
    n_estimators, max_depth, learning_rate
        Stump ensemble settings.
    """

    family: str = "knn"
    k: Optional[int] = None
    selection: str = "cross_validated"
    k_grid: tuple = DEFAULT_K_GRID
    bandwidth: Optional[float] = None
    n_estimators: int = 100
    max_depth: int = 1
    learning_rate: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown regressor family {self.family!r}")
        if self.selection not in ("cross_validated", "fixed"):
            raise DomainError(f"unknown selection {self.selection!r}")
        if self.family == "knn" and self.selection == "fixed" and self.k is None:
            raise DomainError("fixed knn selection needs k")
        for name in ("k", "bandwidth"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise DomainError(f"{name} must be positive")
        if self.n_estimators <= 0 or self.max_depth <= 0 or self.learning_rate <= 0:
            raise DomainError("ensemble hyperparameters must be positive")
        if any(k <= 0 for k in self.k_grid):
            raise DomainError("k_grid entries must be positive")

    def to_dict(self):
        return {
            "family": self.family,
            "k": self.k,
            "selection": self.selection,
            "k_grid": list(self.k_grid),
            "bandwidth": self.bandwidth,
            "n_estimators": self.n_estimators,
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
        }


def _as_2d(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


class _Standardizer:
    """Centre and scale coordinates, dropping those with zero spread."""

    def __init__(self, x):
        sd = x.std(axis=0)
        self.keep = np.flatnonzero(sd > 0)
        self.mean = x.mean(axis=0)[self.keep]
        self.sd = sd[self.keep]

    def __call__(self, x):
        return (_as_2d(x)[:, self.keep] - self.mean) / self.sd


class ConstantSmoother:
    """Predicts the training mean everywhere."""

    def __init__(self, r):
        r = np.asarray(r, dtype=float)
        self.value = r.mean(axis=0)
        self.multi = r.ndim == 2

    def __call__(self, x):
        m = _as_2d(x).shape[0]
        if self.multi:
            return np.tile(self.value, (m, 1))
        return np.full(m, float(self.value))


def _sorted_neighbours(d, idx):
    """Order each row by (distance, training index)."""
    order = np.lexsort((idx, d), axis=-1)
    return np.take_along_axis(d, order, -1), np.take_along_axis(idx, order, -1)


class KnnSmoother:
    """Mean of the ``k`` nearest responses on standardized coordinates.

    Distance ties are broken by training index.
    """

    def __init__(self, x, r, k):
        x = _as_2d(x)
        self.r = np.asarray(r, dtype=float)
        self.n = x.shape[0]
        self.k = int(k)
        self.std = _Standardizer(x)
        self.xs = self.std(x)
        self._const = None
        if self.k >= self.n or self.xs.shape[1] == 0:
            self._const = ConstantSmoother(self.r)
        else:
            self.tree = cKDTree(self.xs)

    def neighbours(self, x):
        """Indices of the ``k`` nearest training points for each query row."""
        q = self.std(x)
        k = self.k
        d, idx = self.tree.query(q, k=k + 1)
        d, idx = _sorted_neighbours(d, idx)
        out = idx[:, :k].copy()
        tied = np.flatnonzero(d[:, k - 1] == d[:, k])
        for i in tied:
            full = np.sqrt(((self.xs - q[i]) ** 2).sum(axis=1))
            out[i] = np.lexsort((np.arange(self.n), full))[:k]
        return out

    def __call__(self, x):
        if self._const is not None:
            return self._const(x)
        nb = self.neighbours(x)
        return self.r[nb].mean(axis=1)


class KernelSmoother:
    """Nadaraya-Watson regression with a Gaussian product kernel on standardized coordinates."""

    def __init__(self, x, r, bandwidth=None):
        x = _as_2d(x)
        self.r = np.asarray(r, dtype=float)
        self.std = _Standardizer(x)
        self.xs = self.std(x)
        n, p = self.xs.shape
        self.h = bandwidth if bandwidth is not None else 1.06 * n ** (-1.0 / (max(p, 1) + 4))

    def __call__(self, x):
        q = self.std(x)
        if self.xs.shape[1] == 0:
            return ConstantSmoother(self.r)(x)
        d2 = ((q[:, None, :] - self.xs[None, :, :]) ** 2).sum(axis=2) / self.h**2
        # shift by the row minimum so the nearest point always carries weight
        w = np.exp(-0.5 * (d2 - d2.min(axis=1, keepdims=True)))
        w /= w.sum(axis=1, keepdims=True)
        return w @ self.r


class LinearSmoother:
    """Ordinary least squares with intercept."""

    def __init__(self, x, r):
        x = _as_2d(x)
        self.r = np.asarray(r, dtype=float)
        design = np.column_stack([np.ones(x.shape[0]), x])
        self.coef = np.linalg.lstsq(design, self.r, rcond=None)[0]

    def __call__(self, x):
        x = _as_2d(x)
        return np.column_stack([np.ones(x.shape[0]), x]) @ self.coef


class StumpEnsemble:
    """Gradient-boosted depth-limited trees, one ensemble per response column."""

    def __init__(self, x, r, config):
        from sklearn.ensemble import GradientBoostingRegressor

        x = _as_2d(x)
        r = np.asarray(r, dtype=float)
        self.multi = r.ndim == 2
        cols = r.T if self.multi else r[None, :]
        self.models = []
        for col in cols:
            gb = GradientBoostingRegressor(
                n_estimators=config.n_estimators,
                max_depth=config.max_depth,
                learning_rate=config.learning_rate,
                random_state=0,
            )
            self.models.append(gb.fit(x, col))

    def __call__(self, x):
        x = _as_2d(x)
        out = np.column_stack([m.predict(x) for m in self.models])
        return out if self.multi else out[:, 0]


def _cv_choose_k(x, r, grid):
    """Pick ``k`` by deterministic 5-fold CV (fold = index mod 5).

    Multi-response fits share ``k``; the criterion is the sum of per-column
    MSE divided by the column variance.
    """
    n = x.shape[0]
    r2 = r if r.ndim == 2 else r[:, None]
    var = r2.var(axis=0)
    live = var > 0
    if not np.any(live):
        return grid[0]
    scale = np.where(live, var, 1.0)
    fold = np.arange(n) % CV_FOLDS
    loss = np.zeros(len(grid))
    for f in range(CV_FOLDS):
        te = fold == f
        tr = ~te
        n_tr = int(tr.sum())
        std = _Standardizer(x[tr])
        xs_tr, xs_te = std(x[tr]), std(x[te])
        if xs_tr.shape[1] == 0:
            pred = np.broadcast_to(r2[tr].mean(axis=0), (len(grid),) + r2[te].shape)
        else:
            kmax = min(max(grid), n_tr)
            d, idx = cKDTree(xs_tr).query(xs_te, k=kmax)
            d, idx = d.reshape(len(xs_te), -1), idx.reshape(len(xs_te), -1)
            d, idx = _sorted_neighbours(d, idx)
            csum = np.cumsum(r2[tr][idx], axis=1)
            pred = np.stack([csum[:, min(k, kmax) - 1] / min(k, kmax) for k in grid])
        err = ((pred - r2[te][None]) ** 2).mean(axis=1)
        loss += (err[:, live] / scale[live]).sum(axis=1)
    return grid[int(np.argmin(loss))]


def fit_conditional_mean(x, r, config=None):
    """Fit a smoother of response(s) ``r`` on covariates ``x``.

    Parameters
    ----------
    x : array_like, shape (n, p)
    r : array_like, shape (n,) or (n, q)
    config : RegressorConfig, optional

    Returns
    -------
    callable
        Maps an ``(m, p)`` query matrix to fitted values.
    """
    config = config or RegressorConfig()
    x = _as_2d(x)
    r = np.asarray(r, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise DomainError("cannot fit a smoother to an empty sample")
    if r.shape[0] != n:
        raise DomainError("x and r lengths differ")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(r))):
        raise DomainError("non-finite training data")
    if config.family == "knn":
        if config.selection == "fixed":
            k = config.k
        else:
            grid = sorted(set(int(k) for k in config.k_grid) | {max(1, int(round(math.sqrt(n))))})
            grid = [k for k in grid if k < n] or [n]
            k = _cv_choose_k(x, r, grid) if n >= 2 * CV_FOLDS and len(grid) > 1 else grid[0]
        return KnnSmoother(x, r, k)
    if config.family == "kernel_smoother":
        return KernelSmoother(x, r, config.bandwidth)
    if config.family == "linear":
        return LinearSmoother(x, r)
    return StumpEnsemble(x, r, config)


@dataclass(frozen=True)
class SecondMoments:
    """Conditional covariance and variance from one shared multi-response smoother.

    Responses are centred first; ``gamma(x) = S[Y Y†] - S[Y] S[Y†]`` and
    ``nu(x) = max(S[Y†^2] - S[Y†]^2, 0)``.
    """

    smoother: object

    def gamma_nu(self, x):
        s = self.smoother(x)
        gamma = s[:, 0] - s[:, 1] * s[:, 2]
        nu = np.maximum(s[:, 3] - s[:, 2] ** 2, 0.0)
        return gamma, nu

    def gamma(self, x):
        return self.gamma_nu(x)[0]

    def nu(self, x):
        return self.gamma_nu(x)[1]


def fit_conditional_second_moments(x, y, y_dagger, config=None):
    """Fit the conditional covariance of ``(y, y_dagger)`` and variance of ``y_dagger``.

    Returns
    -------
    (gamma_hat, nu_hat)
        Callables of the query matrix; ``nu_hat`` is non-negative.
    """
    sm = _fit_moments(x, y, y_dagger, config)
    return sm.gamma, sm.nu


def _fit_moments(x, y, y_dagger, config):
    x = _as_2d(x)
    y = np.asarray(y, dtype=float)
    yd = np.asarray(y_dagger, dtype=float)
    if x.shape[0] < 3:
        raise DomainError("need at least 3 samples for conditional second moments")
    yc = y - y.mean()
    dc = yd - yd.mean()
    return SecondMoments(fit_conditional_mean(x, np.column_stack([yc * dc, yc, dc, dc * dc]), config))


@dataclass(frozen=True)
class FoldArmNuisance:
    """Nuisance functions fitted on one training fold for one arm."""

    fold: int
    arm: int
    mu_hat: object
    mu_dagger_hat: object
    moments: Optional[SecondMoments] = None
    eps_nu: float = 0.0

    @property
    def gamma_hat(self):
        return None if self.moments is None else self.moments.gamma

    @property
    def nu_hat(self):
        return None if self.moments is None else self.moments.nu


@dataclass(frozen=True)
class NuisanceBundle:
    """Fitted nuisances keyed by ``(training fold, arm)``."""

    parts: dict = field(default_factory=dict)
    K: int = 2

    def get(self, fold, arm):
        return self.parts[(fold, arm)]

    def for_evaluation(self, eval_fold, arm):
        """Nuisances to apply to subjects of ``eval_fold``."""
        return self.parts[(source_fold(eval_fold, self.K), arm)]


def source_fold(eval_fold, K):
    """Training fold whose fits are applied to ``eval_fold``: its cyclic predecessor."""
    return (eval_fold - 2) % K + 1


def fit_fold_arm(x, y, t, y_dagger, arm, config=None, fold=0, second_moments=True):
    """Fit ``mu_hat`` on arm-``arm`` rows, ``mu_dagger_hat`` on all rows.

    Second moments, when requested, use arm-``arm`` rows only.
    """
    x = _as_2d(x)
    t = np.asarray(t)
    treated = t == arm
    if treated.sum() < 2:
        raise DomainError(f"training fold {fold} has fewer than 2 subjects in arm {arm}")
    yd = np.asarray(y_dagger, dtype=float)
    mu = fit_conditional_mean(x[treated], np.asarray(y)[treated], config)
    mud = fit_conditional_mean(x, yd, config)
    moments = None
    eps_nu = 0.0
    if second_moments:
        if treated.sum() < 3:
            raise DomainError(f"training fold {fold} has fewer than 3 subjects in arm {arm}")
        moments = _fit_moments(x[treated], np.asarray(y)[treated], yd[treated], config)
        eps_nu = 1e-8 * float(np.var(yd[treated]))
    return FoldArmNuisance(fold, arm, mu, mud, moments, eps_nu)


def cross_fit(dataset, folds, y_dagger, arm, config=None, second_moments=True):
    """Fit nuisances on every fold for one arm.

    Parameters
    ----------
    dataset : RctDataset
    folds : FoldAssignment
    y_dagger : array_like or PredictionSet
        Zero-shot predictions for ``arm`` aligned with ``dataset``.
    """
    from .predictor import PredictionSet

    if isinstance(y_dagger, PredictionSet):
        y_dagger = y_dagger.zero_shot_vector(dataset.ids, arm)
    yd = np.asarray(y_dagger, dtype=float)
    parts = {}
    for fold in range(1, folds.K + 1):
        idx = folds.indices(fold)
        parts[(fold, arm)] = fit_fold_arm(
            dataset.x[idx], dataset.y[idx], dataset.t[idx], yd[idx], arm, config, fold, second_moments
        )
    return NuisanceBundle(parts, folds.K)
