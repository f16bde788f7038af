"""Counterfactual prediction sources and few-shot resampling aggregation.

Three predictor back ends share one batch interface::

    predictor.predict_batch(ids, x, z, arm, demos=None) -> ndarray

``demos`` is an ordered tuple of :class:`Demo` records drawn from a donor fold.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm

from .errors import DomainError, MissingPredictionError, ParseError, RemoteError

__all__ = [
    "Demo",
    "PredictionSet",
    "Predictor",
    "FilePredictor",
    "ConstantPredictor",
    "SyntheticPredictorConfig",
    "SyntheticPredictor",
    "OutcomeModel",
    "RemotePredictor",
    "aggregate_few_shot",
    "draw_demo_sets",
    "read_predictions",
    "write_predictions",
    "equal_probability_bins",
    "mixing_coefficients",
    "hashed_normals",
]

log = logging.getLogger(__name__)

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class Demo:
    """One demonstration example shown to a few-shot predictor."""

    id: str
    x: tuple
    z: str
    y: float


class Predictor(Protocol):
    def predict_batch(self, ids, x, z, arm, demos=None) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# prediction container and JSONL format


@dataclass
class PredictionSet:
    """Stored predictions.

    ``zero_shot[(id, arm)]`` is a scalar. ``few_shot[(id, arm, donor_fold)]``
    is a length-``B`` array of per-resample draws, ordered by resample index.
    """

    zero_shot: dict = field(default_factory=dict)
    few_shot: dict = field(default_factory=dict)
    m: Optional[int] = None
    metadata: dict = field(default_factory=dict)

    @property
    def mode(self):
        return "few_shot" if self.few_shot else "zero_shot"

    @property
    def B(self):
        if not self.few_shot:
            return 0
        return len(next(iter(self.few_shot.values())))

    def zero_shot_vector(self, ids, arm):
        out = np.empty(len(ids))
        zs = self.zero_shot
        for i, s in enumerate(ids):
            try:
                out[i] = zs[(s, arm)]
            except KeyError:
                raise MissingPredictionError((s, arm)) from None
        return out

    def few_shot_draws(self, ids, arm, donor_fold):
        rows = []
        for s in ids:
            try:
                rows.append(self.few_shot[(s, arm, donor_fold)])
            except KeyError:
                raise MissingPredictionError((s, arm, donor_fold)) from None
        return np.array(rows).reshape(len(ids), -1)

    def few_shot_mean(self, ids, arm, donor_fold):
        """Aggregated prediction: mean over the B resample draws."""
        return self.few_shot_draws(ids, arm, donor_fold).mean(axis=1)

    def set_zero_shot(self, ids, arm, values):
        for s, v in zip(ids, np.asarray(values, dtype=float)):
            self.zero_shot[(s, arm)] = float(v)

    def set_few_shot(self, ids, arm, donor_fold, draws):
        """Store a (B, n_query) matrix of draws."""
        draws = np.asarray(draws, dtype=float)
        for j, s in enumerate(ids):
            self.few_shot[(s, arm, donor_fold)] = draws[:, j].copy()

    def merge(self, other):
        self.zero_shot.update(other.zero_shot)
        self.few_shot.update(other.few_shot)
        if other.m is not None:
            self.m = other.m
        return self


def read_predictions(source):
    """Parse JSON-lines predictions into a :class:`PredictionSet`."""
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, (bytes, bytearray)):
        source = source.decode("utf-8")
    ps = PredictionSet()
    staged = {}
    for line_no, line in enumerate(source.splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if "config" in rec and "id" not in rec:
                ps.metadata = rec["config"]
                continue
            sid, arm, value = str(rec["id"]), int(rec["arm"]), float(rec["value"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"prediction line {line_no}: {exc}", row=line_no) from None
        if not math.isfinite(value):
            raise ParseError(f"prediction line {line_no}: non-finite value", row=line_no)
        if "donor_fold" in rec:
            key = (sid, arm, int(rec["donor_fold"]))
            staged.setdefault(key, {})[int(rec["b"])] = value
        else:
            ps.zero_shot[(sid, arm)] = value
    B = None
    for key, draws in staged.items():
        idx = sorted(draws)
        if B is None:
            B = len(idx)
        if idx != list(range(1, B + 1)):
            raise ParseError(f"few-shot draws for {key} are not b=1..{B}")
        ps.few_shot[key] = np.array([draws[b] for b in idx])
    return ps


def write_predictions(ps, config=None):
    """Serialise a :class:`PredictionSet` to JSON lines with a stable ordering.

    ``config``, when given, is written first as a ``{"config": ...}`` record.
    """
    lines = []
    if config is not None:
        lines.append(json.dumps({"config": config}, sort_keys=True))
    for (sid, arm), v in sorted(ps.zero_shot.items()):
        lines.append(json.dumps({"id": sid, "arm": arm, "value": float(v)}))
    for (sid, arm, fold), draws in sorted(ps.few_shot.items(), key=lambda kv: kv[0]):
        for b, v in enumerate(draws, start=1):
            lines.append(
                json.dumps({"id": sid, "arm": arm, "donor_fold": fold, "b": b, "value": float(v)})
            )
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# simple predictors


class FilePredictor:
    """Replays stored zero-shot predictions by subject id."""

    def __init__(self, predictions):
        self.predictions = predictions

    def predict_batch(self, ids, x, z, arm, demos=None):
        return self.predictions.zero_shot_vector(list(ids), arm)


class ConstantPredictor:
    """Returns ``value`` for every query."""

    def __init__(self, value):
        self.value = float(value)

    def predict_batch(self, ids, x, z, arm, demos=None):
        return np.full(len(ids), self.value)


# ---------------------------------------------------------------------------
# deterministic hashed noise


def _key64(text):
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def _splitmix64(v):
    with np.errstate(over="ignore"):
        v = (v + np.uint64(0x9E3779B97F4A7C15)) & _MASK
        v = (v ^ (v >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        v = (v ^ (v >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return v ^ (v >> np.uint64(31))


def hashed_normals(payload_keys, stream):
    """Standard normal draws that depend only on each payload key and a stream label."""
    s = _splitmix64(np.array([_key64(stream)], dtype=np.uint64))[0]
    bits = _splitmix64(np.asarray(payload_keys, dtype=np.uint64) ^ s)
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def _payload_keys(z):
    return np.fromiter((_key64(s) for s in z), dtype=np.uint64, count=len(z))


# ---------------------------------------------------------------------------
# synthetic predictor


class OutcomeModel(Protocol):
    """Ground-truth outcome law used by the synthetic predictor.

    ``Y(t) = mean(x, t) + theta(t) * g + sigma_y * eps`` with ``g`` carried in ``z``.
    """

    sigma_y: float

    def mean(self, x, arm) -> np.ndarray: ...

    def theta(self, arm) -> float: ...


@dataclass(frozen=True)
class SyntheticPredictorConfig:
    """Quality knobs of the synthetic predictor.

    Parameters
    ----------
    rho : float or tuple
        Target conditional correlation between outcome and prediction, per arm
        when a tuple is given.
    delta : float
        Additive bias.
    noise_sd : float
        Conditional standard deviation of the prediction given ``x``.
    seed : int
        Noise stream seed.
    rho_strata : mapping, optional
        Stratum code to target correlation; overrides ``rho`` when given.
        Strata are equal-probability bins of ``x1``.
    demo_sd : float
        Extra noise that depends on the demonstration set (few-shot only).
    """

    rho: object = 0.8
    delta: float = 0.0
    noise_sd: float = 1.0
    seed: int = 0
    rho_strata: Optional[Mapping[int, float]] = None
    demo_sd: float = 0.0

    def __post_init__(self):
        rhos = list(self.rho) if isinstance(self.rho, (tuple, list)) else [self.rho]
        if self.rho_strata:
            rhos += list(self.rho_strata.values())
        for r in rhos:
            if not -1.0 <= float(r) <= 1.0:
                raise DomainError(f"target correlation {r} outside [-1, 1]")
        if self.noise_sd < 0 or self.demo_sd < 0:
            raise DomainError("noise_sd and demo_sd must be non-negative")

    def rho_for(self, arm):
        if isinstance(self.rho, (tuple, list)):
            return float(self.rho[arm - 1])
        return float(self.rho)


def equal_probability_bins(x1, n_bins):
    """Codes ``1..n_bins`` of equal-probability bins of a standard normal coordinate."""
    cuts = norm.ppf(np.arange(1, n_bins) / n_bins)
    return np.searchsorted(cuts, np.asarray(x1, dtype=float), side="right") + 1


def mixing_coefficients(rho, theta, sigma_y, noise_sd):
    """Loadings ``(a, b)`` of the latent signal and fresh noise.

    The prediction residual ``a*theta*g + b*eta`` has standard deviation
    ``noise_sd`` and conditional correlation ``rho`` with ``theta*g + sigma_y*eps``.
    """
    v = theta**2 + sigma_y**2
    s = float(noise_sd)
    if s == 0.0:
        return 0.0, 0.0
    if theta == 0.0:
        return 0.0, s * math.sqrt(max(0.0, 1.0 - rho**2))
    if rho**2 * v > theta**2 * (1 + 1e-12):
        raise DomainError(
            f"|rho|={abs(rho)} exceeds the attainable {math.sqrt(theta**2 / v):.4f} "
            "for a predictor that only sees the latent signal"
        )
    a = rho * s * math.sqrt(v) / theta**2
    b = s * math.sqrt(max(0.0, 1.0 - rho**2 * v / theta**2))
    return a, b


class SyntheticPredictor:
    """Predictor with controllable correlation and bias against a known outcome law.

    ``Y†(t) = mean_t(x) + delta + a*theta_t*g + b*eta (+ demo_sd*zeta)`` where
    ``g = float(z)``, ``eta`` depends on ``(seed, arm, z)`` and ``zeta`` also on
    the ordered demonstration set.
    """

    def __init__(self, model, config):
        self.model = model
        self.config = config
        self._memo = None

    def _rho(self, x, arm):
        cfg = self.config
        if cfg.rho_strata:
            codes = equal_probability_bins(x[:, 0], len(cfg.rho_strata))
            return np.array([float(cfg.rho_strata[int(c)]) for c in codes])
        return np.full(x.shape[0], cfg.rho_for(arm))

    def _base(self, ids, x, z, arm):
        memo = self._memo
        if memo is not None and memo[0] is ids and memo[1] == arm:
            return memo[2], memo[3]
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        try:
            g = np.array([float(s) for s in z])
        except ValueError:
            raise DomainError("synthetic predictor needs a numeric payload") from None
        cfg = self.config
        theta = self.model.theta(arm)
        rho = self._rho(x, arm)
        a = np.empty(len(rho))
        b = np.empty(len(rho))
        for r in np.unique(rho):
            sel = rho == r
            a[sel], b[sel] = mixing_coefficients(float(r), theta, self.model.sigma_y, cfg.noise_sd)
        keys = _payload_keys(z)
        base = self.model.mean(x, arm) + cfg.delta + a * theta * g
        if np.any(b != 0):
            base = base + b * hashed_normals(keys, f"eta|{cfg.seed}|{arm}")
        # batches repeated over resamples reuse the demo-free part
        self._memo = (ids, arm, base, keys)
        return base, keys

    def predict_batch(self, ids, x, z, arm, demos=None):
        base, keys = self._base(ids, x, z, arm)
        cfg = self.config
        if demos is not None and cfg.demo_sd > 0:
            tag = repr([(d.z, float(d.y)) for d in demos])
            return base + cfg.demo_sd * hashed_normals(keys, f"demo|{cfg.seed}|{arm}|{tag}")
        return base.copy()


# ---------------------------------------------------------------------------
# remote predictor


class RemotePredictor:
    """HTTP JSON predictor with a persistent JSON-lines response cache.

    Each query is POSTed as ``{"x", "z", "arm", "demos"}`` and must return
    ``{"value": real}``. Responses are cached by request digest so reruns
    are served without network access.
    """

    def __init__(self, url, cache_path=None, timeout=30.0):
        self.url = url
        self.cache_path = cache_path
        self.timeout = timeout
        self._lock = threading.Lock()
        self._cache = {}
        if cache_path is not None:
            try:
                with open(cache_path, encoding="utf-8") as fh:
                    for line in fh:
                        if line.strip():
                            rec = json.loads(line)
                            self._cache[rec["key"]] = float(rec["value"])
            except FileNotFoundError:
                pass

    @staticmethod
    def _body(x, z, arm, demos):
        return {
            "x": [float(v) for v in x],
            "z": z,
            "arm": int(arm),
            "demos": [{"x": list(d.x), "z": d.z, "y": d.y} for d in (demos or ())],
        }

    def _post(self, body):
        data = json.dumps(body, sort_keys=True).encode("utf-8")
        req = urllib.request.Request(
            self.url, data=data, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise RemoteError(f"HTTP {exc.code} from {self.url}", retryable=exc.code >= 500) from None
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise RemoteError(f"transport failure: {exc}", retryable=True) from None
        except json.JSONDecodeError:
            raise RemoteError("response is not JSON") from None
        try:
            value = float(payload["value"])
        except (KeyError, TypeError, ValueError):
            raise RemoteError("response lacks a numeric 'value'") from None
        if not math.isfinite(value):
            raise RemoteError("response value is not finite")
        return value

    def predict_one(self, x, z, arm, demos=None):
        body = self._body(x, z, arm, demos)
        key = hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8")).hexdigest()
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        value = self._post(body)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = value
                if self.cache_path is not None:
                    with open(self.cache_path, "a", encoding="utf-8") as fh:
                        fh.write(json.dumps({"key": key, "value": value}) + "\n")
            return self._cache[key]

    def predict_batch(self, ids, x, z, arm, demos=None):
        x = np.asarray(x, dtype=float)
        return np.array([self.predict_one(x[i], z[i], arm, demos) for i in range(len(ids))])


# ---------------------------------------------------------------------------
# few-shot aggregation


def draw_demo_sets(donors, arm, m, B, seed, donor_fold=1):
    """Draw ``B`` ordered demonstration sets of size ``m`` from arm-``arm`` donors.

    Each set is sampled without replacement from its own RNG stream keyed by
    ``(seed, arm, donor_fold, b)``, so sets are independent across ``b`` and
    reproducible regardless of evaluation order.
    """
    eligible = np.flatnonzero(donors.t == arm)
    if m < 1 or B < 1:
        raise DomainError("need m >= 1 and B >= 1")
    if eligible.size < m:
        raise DomainError(
            f"donor fold {donor_fold} has {eligible.size} subjects in arm {arm}, need m={m}"
        )
    sets = []
    for b in range(1, B + 1):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(arm), int(donor_fold), b]))
        pick = rng.choice(eligible, size=m, replace=False)
        sets.append(
            tuple(
                Demo(donors.ids[i], tuple(float(v) for v in donors.x[i]), donors.z[i], float(donors.y[i]))
                for i in pick
            )
        )
    return sets


def aggregate_few_shot(predictor, donors, queries, arm, m, B, seed, donor_fold=1):
    """Query ``predictor`` with ``B`` resampled demonstration sets.

    Parameters
    ----------
    donors : RctDataset
        Donor fold; only its arm-``arm`` subjects are eligible demonstrations.
    queries : RctDataset
        Subjects to predict for.

    Returns
    -------
    PredictionSet
        Few-shot draws keyed by ``(id, arm, donor_fold)``; use
        :meth:`PredictionSet.few_shot_mean` for the aggregates.
    """
    sets = draw_demo_sets(donors, arm, m, B, seed, donor_fold)
    draws = np.vstack(
        [predictor.predict_batch(queries.ids, queries.x, queries.z, arm, demos=d) for d in sets]
    )
    ps = PredictionSet(m=m)
    ps.set_few_shot(queries.ids, arm, donor_fold, draws)
    return ps
