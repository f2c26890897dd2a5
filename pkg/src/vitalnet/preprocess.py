"""Tabular normalization: fit per-field statistics, map records to 10-vectors.

Field -> scaler:

* age, bmi, max_diameter: min-max
* cea, afp: z-score (population standard deviation)
* ca125, ca199, ca153: robust scaling by median and interquartile range
* abdominal_pain, abdominal_bloating: yes/no -> 1/0
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

FIELD_ORDER = (
    "age", "bmi", "abdominal_pain", "abdominal_bloating",
    "ca125", "cea", "ca199", "afp", "ca153", "max_diameter",
)
MINMAX_FIELDS = ("age", "bmi", "max_diameter")
ZSCORE_FIELDS = ("cea", "afp")
ROBUST_FIELDS = ("ca125", "ca199", "ca153")
BINARY_FIELDS = ("abdominal_pain", "abdominal_bloating")
NUMERIC_FIELDS = MINMAX_FIELDS + ZSCORE_FIELDS + ROBUST_FIELDS

POLICIES = ("train-only", "all-samples")


class SchemaError(ValueError):
    """A tabular record violates the field schema."""


class FitError(ValueError):
    """A field is degenerate over the fit population."""


@dataclass(frozen=True)
class TabularRecord:
    age: float
    bmi: float
    abdominal_pain: str
    abdominal_bloating: str
    ca125: float
    cea: float
    ca199: float
    afp: float
    ca153: float
    max_diameter: float

    def __post_init__(self):
        for name in NUMERIC_FIELDS:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise SchemaError(f"{name}: expected a number, got {v!r}")
            if not math.isfinite(v) or v < 0:
                raise SchemaError(f"{name}: expected a finite non-negative value, got {v!r}")
        for name in BINARY_FIELDS:
            encode_binary(getattr(self, name), field=name)

    @classmethod
    def from_dict(cls, d: dict) -> "TabularRecord":
        names = {f.name for f in fields(cls)}
        missing = names - d.keys()
        extra = d.keys() - names
        if missing or extra:
            raise SchemaError(f"tabular fields mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def encode_binary(v, field: str = "flag") -> int:
    if v == "yes":
        return 1
    if v == "no":
        return 0
    raise SchemaError(f"{field}: expected 'yes' or 'no', got {v!r}")


@dataclass(frozen=True)
class MinMaxStats:
    x_min: float
    x_max: float


@dataclass(frozen=True)
class ZScoreStats:
    mu: float
    sigma: float


@dataclass(frozen=True)
class RobustStats:
    median: float
    q1: float
    q3: float


@dataclass(frozen=True)
class PreprocessStats:
    """Fitted statistics keyed by field name, plus the fit-population policy."""

    minmax: dict
    zscore: dict
    robust: dict
    policy: str = "train-only"

    def to_json(self) -> dict:
        out = {"policy": self.policy}
        for name, s in self.minmax.items():
            out[name] = {"x_min": s.x_min, "x_max": s.x_max}
        for name, s in self.zscore.items():
            out[name] = {"mu": s.mu, "sigma": s.sigma}
        for name, s in self.robust.items():
            out[name] = {"median": s.median, "q1": s.q1, "q3": s.q3}
        return out

    @classmethod
    def from_json(cls, d: dict) -> "PreprocessStats":
        return cls(
            minmax={k: MinMaxStats(**d[k]) for k in MINMAX_FIELDS},
            zscore={k: ZScoreStats(**d[k]) for k in ZSCORE_FIELDS},
            robust={k: RobustStats(**d[k]) for k in ROBUST_FIELDS},
            policy=d["policy"],
        )

    def save(self, path) -> None:
        # repr-based float serialization round-trips every double exactly
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PreprocessStats":
        return cls.from_json(json.loads(Path(path).read_text()))


def _quantile(values: np.ndarray, p: float) -> float:
    # linear interpolation at zero-indexed position p*(n-1)
    return float(np.quantile(values, p, method="linear"))


def fit(records, policy: str = "train-only") -> PreprocessStats:
    """Fit per-field statistics over ``records``.

    ``policy`` only labels which population the caller passed in (training
    cases or every case); it is stored so reports can state it.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown fit policy {policy!r}; expected one of {POLICIES}")
    records = list(records)
    if len(records) < 2:
        raise FitError(f"need at least 2 records to fit, got {len(records)}")
    cols = {name: np.array([getattr(r, name) for r in records], dtype=np.float64) for name in NUMERIC_FIELDS}

    minmax = {}
    for name in MINMAX_FIELDS:
        lo, hi = float(cols[name].min()), float(cols[name].max())
        if hi == lo:
            raise FitError(f"{name}: x_max == x_min ({lo}); min-max scaling undefined")
        minmax[name] = MinMaxStats(lo, hi)

    zscore = {}
    for name in ZSCORE_FIELDS:
        mu = float(cols[name].mean())
        sigma = float(cols[name].std())  # population (ddof=0)
        if sigma == 0:
            raise FitError(f"{name}: sigma == 0; z-score undefined")
        zscore[name] = ZScoreStats(mu, sigma)

    robust = {}
    for name in ROBUST_FIELDS:
        q1, med, q3 = (_quantile(cols[name], p) for p in (0.25, 0.5, 0.75))
        if q3 == q1:
            raise FitError(f"{name}: Q3 == Q1 ({q1}); robust scaling undefined")
        robust[name] = RobustStats(med, q1, q3)

    return PreprocessStats(minmax, zscore, robust, policy)


def min_max(x: float, stats: MinMaxStats) -> float:
    # deliberately unclamped: values outside the fit range map outside [0, 1]
    return (x - stats.x_min) / (stats.x_max - stats.x_min)


def zscore(x: float, stats: ZScoreStats) -> float:
    return (x - stats.mu) / stats.sigma


def robust_scale(x: float, stats: RobustStats) -> float:
    return (x - stats.median) / (stats.q3 - stats.q1)


def transform(r: TabularRecord, stats: PreprocessStats) -> np.ndarray:
    """Map one record to its normalized 10-vector in ``FIELD_ORDER``."""
    out = np.empty(len(FIELD_ORDER), dtype=np.float64)
    for i, name in enumerate(FIELD_ORDER):
        v = getattr(r, name)
        if name in stats.minmax:
            out[i] = min_max(v, stats.minmax[name])
        elif name in stats.zscore:
            out[i] = zscore(v, stats.zscore[name])
        elif name in stats.robust:
            out[i] = robust_scale(v, stats.robust[name])
        else:
            out[i] = encode_binary(v, field=name)
    return out


def transform_many(records, stats: PreprocessStats) -> np.ndarray:
    records = list(records)
    if not records:
        return np.zeros((0, len(FIELD_ORDER)))
    return np.stack([transform(r, stats) for r in records])
