"""Experiment dataset, known propensities, fold assignment and CSV ingestion."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DomainError, ParseError

__all__ = [
    "PropensitySpec",
    "RctDataset",
    "FoldAssignment",
    "CsvSchema",
    "load_dataset",
    "dump_dataset",
    "load_propensity",
    "split_folds",
    "lambda_t",
    "quartile_strata",
]

DEFAULT_OVERLAP_EPS = 0.01


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PropensitySpec:
    """Known assignment probabilities, either constant per arm or per stratum.

    Arms are labelled ``1..arm_count``. ``constant[t-1]`` is e_t for every
    subject; ``table[c][t-1]`` is e_t for subjects in coarse stratum ``c``.
    """

    arm_count: int
    constant: Optional[tuple] = None
    table: Optional[Mapping[int, tuple]] = None
    eps: float = DEFAULT_OVERLAP_EPS

    def __post_init__(self):
        if self.arm_count < 2:
            raise DomainError("arm_count must be >= 2")
        if (self.constant is None) == (self.table is None):
            raise DomainError("exactly one of constant or table must be given")
        rows = [self.constant] if self.constant is not None else list(self.table.values())
        if self.constant is not None:
            object.__setattr__(self, "constant", tuple(float(v) for v in self.constant))
        else:
            object.__setattr__(
                self,
                "table",
                {int(c): tuple(float(v) for v in row) for c, row in self.table.items()},
            )
        for row in rows:
            if len(row) != self.arm_count:
                raise DomainError(
                    f"propensity row has {len(row)} entries, expected {self.arm_count}"
                )
            for v in row:
                if not (self.eps <= v <= 1 - self.eps):
                    raise DomainError(
                        f"propensity {v} outside [{self.eps}, {1 - self.eps}]"
                    )
            if abs(sum(row) - 1.0) > 1e-12:
                raise DomainError(f"propensities {row} do not sum to 1")

    @classmethod
    def balanced(cls, arm_count=2):
        return cls(arm_count, constant=tuple([1.0 / arm_count] * arm_count))

    @property
    def needs_strata(self):
        return self.table is not None

    def matrix(self, n, x_coarse=None):
        """Return the (n, k) matrix of per-subject arm probabilities."""
        if self.constant is not None:
            return np.tile(np.asarray(self.constant), (n, 1))
        if x_coarse is None:
            raise DomainError("stratified propensities need x_coarse")
        out = np.empty((n, self.arm_count))
        for i, c in enumerate(np.asarray(x_coarse)):
            try:
                out[i] = self.table[int(c)]
            except KeyError:
                raise DomainError(f"stratum {int(c)} has no propensity entry") from None
        return out

    def to_json(self):
        if self.constant is not None:
            return {str(t + 1): p for t, p in enumerate(self.constant)}
        return {
            "strata": {
                str(c): {str(t + 1): p for t, p in enumerate(row)}
                for c, row in sorted(self.table.items())
            }
        }

    @classmethod
    def from_json(cls, obj, eps=DEFAULT_OVERLAP_EPS):
        def arm_row(d):
            arms = sorted(int(a) for a in d)
            if arms != list(range(1, len(arms) + 1)):
                raise DomainError(f"arms must be labelled 1..k, got {arms}")
            return tuple(float(d[str(a)] if str(a) in d else d[a]) for a in arms)

        if "strata" in obj:
            table = {int(c): arm_row(row) for c, row in obj["strata"].items()}
            k = len(next(iter(table.values())))
            return cls(k, table=table, eps=eps)
        row = arm_row(obj)
        return cls(len(row), constant=row, eps=eps)


def lambda_t(propensity, arm, x_coarse=None):
    """Propensity adjustment weight 1/e_t - 1 for one subject."""
    if not 1 <= arm <= propensity.arm_count:
        raise DomainError(f"arm {arm} outside 1..{propensity.arm_count}")
    if propensity.constant is not None:
        e = propensity.constant[arm - 1]
    else:
        e = propensity.table[int(x_coarse)][arm - 1]
    return 1.0 / e - 1.0


@dataclass(frozen=True, eq=False)
class RctDataset:
    """Immutable table of trial subjects.

    ``t`` holds arm labels ``1..arm_count``. ``z`` is an opaque text payload
    that only predictors may interpret.
    """

    ids: tuple
    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    propensity: PropensitySpec
    x_coarse: Optional[np.ndarray] = None
    z: Optional[tuple] = None
    _index: dict = field(default=None, repr=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        n = len(ids)
        y = _frozen(self.y)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        x = _frozen(x)
        t_raw = np.asarray(self.t)
        if t_raw.shape != (n,) or y.shape != (n,) or x.shape[0] != n:
            raise DomainError("ids, y, t and x must have the same length")
        if not np.all(np.isfinite(y)):
            raise DomainError("outcomes must be finite")
        if x.shape[1] < 1 or not np.all(np.isfinite(x)):
            raise DomainError("covariates must be finite with dimension >= 1")
        if not np.all(t_raw == np.round(t_raw)):
            raise DomainError("arm labels must be integers")
        t = _frozen(t_raw, dtype=np.int64)
        k = self.propensity.arm_count
        bad = np.flatnonzero((t < 1) | (t > k))
        if bad.size:
            raise DomainError(f"row {bad[0]}: arm {t[bad[0]]} outside 1..{k}")
        index = {}
        for i, s in enumerate(ids):
            if s in index:
                raise DomainError(f"duplicate id {s!r}")
            index[s] = i
        xc = None
        if self.x_coarse is not None:
            xc = _frozen(self.x_coarse, dtype=np.int64)
            if xc.shape != (n,):
                raise DomainError("x_coarse must have one code per subject")
        z = tuple("" for _ in range(n)) if self.z is None else tuple(str(s) for s in self.z)
        if len(z) != n:
            raise DomainError("z must have one payload per subject")
        if self.propensity.needs_strata and xc is None:
            raise DomainError("stratified propensities need x_coarse")
        for name, val in [("ids", ids), ("y", y), ("t", t), ("x", x), ("x_coarse", xc),
                          ("z", z), ("_index", index)]:
            object.__setattr__(self, name, val)
        e = self.propensity.matrix(n, xc)
        e.flags.writeable = False
        object.__setattr__(self, "_e", e)

    @property
    def n(self):
        return len(self.ids)

    @property
    def p(self):
        return self.x.shape[1]

    @property
    def arm_count(self):
        return self.propensity.arm_count

    def e(self, arm):
        """Per-subject probability of assignment to ``arm``."""
        return self._e[:, arm - 1]

    def lam(self, arm):
        return 1.0 / self.e(arm) - 1.0

    def index_of(self, subject_id):
        return self._index[str(subject_id)]

    def subset(self, idx):
        idx = np.asarray(idx)
        return RctDataset(
            ids=tuple(self.ids[i] for i in idx),
            y=self.y[idx],
            t=self.t[idx],
            x=self.x[idx],
            propensity=self.propensity,
            x_coarse=None if self.x_coarse is None else self.x_coarse[idx],
            z=tuple(self.z[i] for i in idx),
        )

    def with_coarsening(self, codes):
        return RctDataset(self.ids, self.y, self.t, self.x, self.propensity, codes, self.z)

    def coarse_codes(self):
        """Stratum codes, falling back to quartile bins when none were supplied."""
        if self.x_coarse is not None:
            return self.x_coarse
        return quartile_strata(self.x)

    def __eq__(self, other):
        if not isinstance(other, RctDataset):
            return NotImplemented
        same_xc = (self.x_coarse is None and other.x_coarse is None) or (
            self.x_coarse is not None
            and other.x_coarse is not None
            and np.array_equal(self.x_coarse, other.x_coarse)
        )
        return (
            self.ids == other.ids
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and same_xc
            and self.z == other.z
            and self.propensity == other.propensity
        )

    __hash__ = None


def quartile_strata(x):
    """Cross-product of quartile bins of the first min(p, 2) coordinates.

    Codes run from 1 to at most 16.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    code = np.zeros(x.shape[0], dtype=np.int64)
    for j in range(min(x.shape[1], 2)):
        cuts = np.quantile(x[:, j], [0.25, 0.5, 0.75])
        code = code * 4 + np.searchsorted(cuts, x[:, j], side="right")
    return code + 1


@dataclass(frozen=True)
class FoldAssignment:
    """Partition of subjects ``0..n-1`` into folds labelled ``1..K``."""

    fold_of: np.ndarray
    K: int
    seed: int

    def indices(self, fold):
        return np.flatnonzero(self.fold_of == fold)

    def sizes(self):
        return [int(np.sum(self.fold_of == f)) for f in range(1, self.K + 1)]

    def relabel(self, mapping):
        """Return a copy with fold labels permuted by ``mapping[old] = new``."""
        new = np.array([mapping[int(f)] for f in self.fold_of], dtype=np.int64)
        return FoldAssignment(_frozen(new, np.int64), self.K, self.seed)


def split_folds(n, K, seed):
    """Randomly split ``n`` subjects into ``K`` folds whose sizes differ by at most one."""
    if K < 2 or K > n:
        raise DomainError(f"need 2 <= K <= n, got K={K}, n={n}")
    perm = np.random.default_rng(np.random.SeedSequence(int(seed))).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % K + 1
    return FoldAssignment(_frozen(fold_of, np.int64), int(K), int(seed))


@dataclass(frozen=True)
class CsvSchema:
    """Column names for :func:`load_dataset`.

    ``x=None`` picks every column named ``x<digits>`` in numeric order.
    """

    id: str = "id"
    y: str = "y"
    t: str = "t"
    x: Optional[Sequence[str]] = None
    x_coarse: Optional[str] = "xc"
    z: Optional[str] = "z"


_XCOL = re.compile(r"^x(\d+)$")


def _as_text(source):
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, str):
        return io.StringIO(source)
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return io.StringIO(data)


def _number(raw, row, column):
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise ParseError(f"row {row}: column {column!r} is not numeric: {raw!r}", row, column) from None
    if not math.isfinite(v):
        raise ParseError(f"row {row}: column {column!r} is not finite", row, column)
    return v


def load_dataset(source, propensity, schema=None):
    """Parse a CSV export into an :class:`RctDataset`.

    ``source`` may be bytes, text, or a readable stream.
    """
    schema = schema or CsvSchema()
    reader = csv.DictReader(_as_text(source))
    header = reader.fieldnames or []
    for col in (schema.id, schema.y, schema.t):
        if col not in header:
            raise ParseError(f"missing required column {col!r}", column=col)
    if schema.x is None:
        xcols = sorted((c for c in header if _XCOL.match(c)), key=lambda c: int(_XCOL.match(c).group(1)))
    else:
        xcols = list(schema.x)
        for c in xcols:
            if c not in header:
                raise ParseError(f"missing covariate column {c!r}", column=c)
    if not xcols:
        raise ParseError("no covariate columns found", column="x1")
    has_xc = schema.x_coarse is not None and schema.x_coarse in header
    has_z = schema.z is not None and schema.z in header

    ids, ys, ts, xs, xcs, zs = [], [], [], [], [], []
    for row_no, row in enumerate(reader):
        ids.append(row[schema.id])
        ys.append(_number(row[schema.y], row_no, schema.y))
        tv = _number(row[schema.t], row_no, schema.t)
        if tv != int(tv):
            raise DomainError(f"row {row_no}: arm {row[schema.t]!r} is not an integer")
        ts.append(int(tv))
        xs.append([_number(row[c], row_no, c) for c in xcols])
        if has_xc:
            xcs.append(int(_number(row[schema.x_coarse], row_no, schema.x_coarse)))
        zs.append(row[schema.z] if has_z and row[schema.z] is not None else "")
    if not ids:
        raise ParseError("no data rows")
    return RctDataset(
        ids=tuple(ids),
        y=np.array(ys),
        t=np.array(ts),
        x=np.array(xs),
        propensity=propensity,
        x_coarse=np.array(xcs) if has_xc else None,
        z=tuple(zs),
    )


def dump_dataset(ds):
    """Serialise to the canonical CSV layout ``id,y,t,x1..xp[,xc],z``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["id", "y", "t"] + [f"x{j + 1}" for j in range(ds.p)]
    if ds.x_coarse is not None:
        head.append("xc")
    head.append("z")
    w.writerow(head)
    for i in range(ds.n):
        row = [ds.ids[i], repr(float(ds.y[i])), int(ds.t[i])]
        row += [repr(float(v)) for v in ds.x[i]]
        if ds.x_coarse is not None:
            row.append(int(ds.x_coarse[i]))
        row.append(ds.z[i])
        w.writerow(row)
    return buf.getvalue()


def load_propensity(source, eps=DEFAULT_OVERLAP_EPS):
    """Read a propensity JSON document (arm -> probability, or ``{"strata": ...}``)."""
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, (bytes, bytearray)):
        source = source.decode("utf-8")
    try:
        obj = json.loads(source)
    except json.JSONDecodeError as exc:
        raise ParseError(f"propensity file is not valid JSON: {exc}") from None
    return PropensitySpec.from_json(obj, eps=eps)
