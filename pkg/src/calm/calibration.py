"""Calibration weights: smooth plug-in, stratum-robust, and the two-arm ATE vector."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import DomainError
from .nuisance import _as_2d, fit_conditional_mean

__all__ = [
    "CalibrationWeights",
    "weight_smooth",
    "weight_robust",
    "weight_ate",
    "solve_ate_weights",
    "ATE_COND_LIMIT",
]

log = logging.getLogger(__name__)

ATE_COND_LIMIT = 1e8
RIDGE_SCALE = 1e-6


@dataclass(frozen=True)
class CalibrationWeights:
    """One family of fitted calibration weights.

    ``kind`` is ``"smooth"`` (``smooth(x) -> (m,)``), ``"robust"``
    (``robust[code] -> float``) or ``"ate_vector"`` (``ate(x) -> (m, 2)``).
    """

    kind: str
    smooth: Optional[Callable] = None
    robust: Optional[Mapping[int, float]] = None
    ate: Optional[Callable] = None
    eps_nu: float = 0.0

    def evaluate(self, x=None, codes=None):
        """Weights at query rows; ``codes`` are stratum codes for the robust family."""
        if self.kind == "smooth":
            return self.smooth(x)
        if self.kind == "robust":
            out = np.zeros(len(codes))
            missing = set()
            for i, c in enumerate(np.asarray(codes)):
                w = self.robust.get(int(c))
                if w is None:
                    missing.add(int(c))
                else:
                    out[i] = w
            if missing:
                log.warning("strata %s have no fitted weight; using 0", sorted(missing))
            return out
        return self.ate(x)

    def to_json(self, grid=None):
        """Diagnostic export: the stratum table, or weights evaluated on ``grid`` rows."""
        doc = {"kind": self.kind, "eps_nu": self.eps_nu}
        if self.kind == "robust":
            doc["strata"] = {str(c): float(w) for c, w in sorted(self.robust.items())}
        elif grid is not None:
            g = _as_2d(grid)
            doc["grid"] = g.tolist()
            doc["weights"] = np.asarray(self.evaluate(g)).tolist()
        return doc


def weight_smooth(nuisance):
    """Plug-in weight ``gamma_hat / nu_hat``, zero where ``nu_hat <= eps_nu``.

    Parameters
    ----------
    nuisance : FoldArmNuisance
        Must carry fitted second moments.
    """
    if nuisance.moments is None:
        raise DomainError("smooth weights need fitted second moments")
    moments, eps = nuisance.moments, nuisance.eps_nu

    def omega(x):
        gamma, nu = moments.gamma_nu(x)
        ok = nu > eps
        out = np.zeros_like(gamma)
        out[ok] = gamma[ok] / nu[ok]
        return out

    return CalibrationWeights("smooth", smooth=omega, eps_nu=eps)


def weight_robust(y, t, y_dagger, codes, mu, mu_dagger, lam, arm, eps_nu=None):
    """Stratum-wise propensity-weighted regression slope of residual Y on residual Y†.

    Parameters
    ----------
    y, t, y_dagger, codes : array_like
        Outcomes, arms, predictions for ``arm`` and stratum codes of the
        weight-estimation sample.
    mu, mu_dagger : array_like
        Fitted conditional means evaluated at the same subjects.
    lam : array_like
        Per-subject ``1/e_t - 1``.
    eps_nu : float, optional
        Floor for the weighted residual variance of Y† in a stratum. Defaults
        to ``1e-8`` times the variance of Y† among arm-``arm`` subjects.

    Returns
    -------
    CalibrationWeights
        ``kind="robust"`` with one weight per observed stratum.
    """
    y, yd, mu, mud, lam = (np.asarray(a, dtype=float) for a in (y, y_dagger, mu, mu_dagger, lam))
    t = np.asarray(t)
    codes = np.asarray(codes)
    sel = t == arm
    if eps_nu is None:
        eps_nu = 1e-8 * float(np.var(yd[sel])) if sel.any() else 0.0
    ry = (y - mu)[sel]
    rd = (yd - mud)[sel]
    lw = lam[sel]
    cs = codes[sel]
    table = {}
    for c in np.unique(codes):
        m = cs == c
        if m.sum() < 2:
            log.warning("stratum %s has fewer than 2 subjects in arm %s; weight 0", int(c), arm)
            table[int(c)] = 0.0
            continue
        den = float(np.sum(lw[m] * rd[m] ** 2))
        # floor compares a weighted variance, not a raw sum, against eps_nu
        if den / float(np.sum(lw[m])) <= eps_nu:
            table[int(c)] = 0.0
        else:
            table[int(c)] = float(np.sum(lw[m] * ry[m] * rd[m])) / den
    return CalibrationWeights("robust", robust=table, eps_nu=eps_nu)


def solve_ate_weights(sigma, cov, cond_limit=ATE_COND_LIMIT):
    """Solve ``sigma[i] @ w[i] = cov[i]`` for a stack of 2x2 systems.

    A ridge of ``1e-6 * trace / 2`` is added where the condition number
    exceeds ``cond_limit``; rows with a zero matrix get ``w = 0``.

    Returns
    -------
    (w, ridged)
        ``w`` has shape (m, 2); ``ridged`` flags rows that took the ridge branch.
    """
    sigma = np.array(sigma, dtype=float).reshape(-1, 2, 2)
    cov = np.asarray(cov, dtype=float).reshape(-1, 2)
    tr = sigma[:, 0, 0] + sigma[:, 1, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(sigma)
    ridged = ~(cond <= cond_limit)
    sigma[ridged, 0, 0] += RIDGE_SCALE * tr[ridged] / 2
    sigma[ridged, 1, 1] += RIDGE_SCALE * tr[ridged] / 2
    a, b, c, d = sigma[:, 0, 0], sigma[:, 0, 1], sigma[:, 1, 0], sigma[:, 1, 1]
    det = a * d - b * c
    w = np.zeros_like(cov)
    ok = det > 0
    w[ok, 0] = (d[ok] * cov[ok, 0] - b[ok] * cov[ok, 1]) / det[ok]
    w[ok, 1] = (a[ok] * cov[ok, 1] - c[ok] * cov[ok, 0]) / det[ok]
    return w, ridged


def weight_ate(x, y, t, yd_t, yd_tp, e_t, e_tp, arms, config=None):
    """Two-arm ATE weight ``Sigma_V(x)^-1 Cov(V, Z | x)``.

    ``V = (sqrt(l_t) Y†(t), sqrt(l_t') Y†(t'))`` and the observed-data
    ``Z = sqrt(l_t) 1{T=t}/e_t Y + sqrt(l_t') 1{T=t'}/e_t' Y`` where
    ``l = 1/e - 1``. All conditional moments come from one smoother fitted
    on every subject of the training sample.
    """
    t_arm, tp_arm = arms
    x = _as_2d(x)
    y, yd_t, yd_tp, e_t, e_tp = (np.asarray(a, dtype=float) for a in (y, yd_t, yd_tp, e_t, e_tp))
    t = np.asarray(t)
    if not ((t == t_arm).any() and (t == tp_arm).any()):
        raise DomainError("both arms must be present in the weight-estimation sample")
    st = np.sqrt(1.0 / e_t - 1.0)
    stp = np.sqrt(1.0 / e_tp - 1.0)
    v1 = st * yd_t
    v2 = stp * yd_tp
    z = st * (t == t_arm) / e_t * y + stp * (t == tp_arm) / e_tp * y
    v1, v2, z = v1 - v1.mean(), v2 - v2.mean(), z - z.mean()
    cols = np.column_stack([v1, v2, z, v1 * v1, v1 * v2, v2 * v2, v1 * z, v2 * z])
    sm = fit_conditional_mean(x, cols, config)

    def omega(xq):
        s = sm(xq)
        m1, m2, mz = s[:, 0], s[:, 1], s[:, 2]
        s11 = s[:, 3] - m1 * m1
        s12 = s[:, 4] - m1 * m2
        s22 = s[:, 5] - m2 * m2
        sigma = np.stack([np.stack([s11, s12], -1), np.stack([s12, s22], -1)], -2)
        cov = np.column_stack([s[:, 6] - m1 * mz, s[:, 7] - m2 * mz])
        return solve_ate_weights(sigma, cov)[0]

    return CalibrationWeights("ate_vector", ate=omega)
