"""Screening datasets: CSV ingestion, schema files, transforms, subsampling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml


class SchemaError(ValueError):
    """The schema or the CSV header does not match what was asked for."""


class DataError(ValueError):
    """A value in the data cannot be used (non-finite, non-positive under log)."""


@dataclass(frozen=True)
class Dataset:
    """Candidate features plus the hidden ground-truth scores of both tests."""

    features: np.ndarray
    cheap: np.ndarray
    expensive: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "cheap", np.asarray(self.cheap, dtype=float).reshape(-1))
        object.__setattr__(self, "expensive", np.asarray(self.expensive, dtype=float).reshape(-1))
        object.__setattr__(self, "ids", np.asarray(self.ids).reshape(-1))
        n = X.shape[0]
        if not (self.cheap.size == self.expensive.size == self.ids.size == n):
            raise DataError("features, scores and ids must all have n rows")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.features[rows], self.cheap[rows], self.expensive[rows], self.ids[rows])


@dataclass
class SchemaConfig:
    features: list[str]
    cheap: str
    expensive: str
    id_column: Optional[str] = None
    transforms: dict[str, str] = field(default_factory=dict)
    standardize: bool = True
    standardize_scores: bool = False
    subsample: Optional[int] = None
    seed: int = 0
    c_cheap: float = 1.0
    c_expensive: float = 1.0
    single_test_c_expensive: Optional[float] = None
    budget: float = 100.0
    N: int = 100

    def __post_init__(self):
        if not self.features:
            raise SchemaError("schema needs at least one feature column")
        for col, t in self.transforms.items():
            if t not in ("identity", "log"):
                raise SchemaError(f"unknown transform {t!r} for column {col!r}")
        if isinstance(self.subsample, str):
            if self.subsample != "all":
                raise SchemaError(f"subsample must be a count or 'all', got {self.subsample!r}")
            self.subsample = None

    @classmethod
    def from_dict(cls, raw: dict) -> "SchemaConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "SchemaConfig":
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise SchemaError(f"{path}: schema file must be a mapping")
        return cls.from_dict(raw)


def _parse(value: str, column: str, row_id) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"row {row_id}: column {column!r} is not numeric: {value!r}") from None


def _standardize(A: np.ndarray) -> np.ndarray:
    A = A - A.mean(axis=0)
    sd = A.std(axis=0)
    return A / np.where(sd > 0, sd, 1.0)


def load_dataset(path, schema: SchemaConfig) -> Dataset:
    """Read a header-row CSV and apply the schema's transforms.

    Order of work: parse, transform (log where configured), subsample
    uniformly without replacement, then standardize so that the final rows
    have zero-mean, unit-variance feature columns.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = list(schema.features) + [schema.cheap, schema.expensive]
        if schema.id_column:
            wanted.append(schema.id_column)
        for col in wanted:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        numeric = list(schema.features) + [schema.cheap, schema.expensive]
        rows, ids = [], []
        for k, rec in enumerate(reader):
            rid = rec[schema.id_column] if schema.id_column else k
            rows.append([_parse(rec[c], c, rid) for c in numeric])
            ids.append(rid)
    table = np.asarray(rows, dtype=float).reshape(len(rows), len(numeric))
    ids = np.asarray(ids)

    for j, col in enumerate(numeric):
        if schema.transforms.get(col, "identity") == "log":
            bad = np.flatnonzero(~(table[:, j] > 0))
            if bad.size:
                raise DataError(f"row {ids[bad[0]]}: column {col!r} must be positive for a log transform")
            table[:, j] = np.log(table[:, j])
    bad_rows = np.flatnonzero(~np.isfinite(table).all(axis=1))
    if bad_rows.size:
        raise DataError(f"row {ids[bad_rows[0]]}: non-finite value")

    if schema.subsample is not None and schema.subsample < table.shape[0]:
        rng = np.random.default_rng(schema.seed)
        keep = np.sort(rng.choice(table.shape[0], size=schema.subsample, replace=False))
        table, ids = table[keep], ids[keep]

    d = len(schema.features)
    X, yc, ye = table[:, :d], table[:, d], table[:, d + 1]
    if schema.standardize:
        X = _standardize(X)
    if schema.standardize_scores:
        yc, ye = _standardize(yc[:, None])[:, 0], _standardize(ye[:, None])[:, 0]
    return Dataset(X, yc, ye, ids)


def write_dataset(path, data: Dataset, feature_names=None) -> None:
    """Write ``data`` as CSV with columns ``id, <features>, cheap, expensive``.

    Floats are written with ``repr`` so a read-back is exact.
    """
    names = list(feature_names) if feature_names else [f"x{j}" for j in range(data.d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *names, "cheap", "expensive"])
        for k in range(data.n):
            w.writerow([data.ids[k], *map(repr, data.features[k].tolist()), repr(float(data.cheap[k])), repr(float(data.expensive[k]))])


def identity_schema(d: int, **overrides) -> SchemaConfig:
    """Schema matching :func:`write_dataset`'s default column names."""
    base = dict(
        features=[f"x{j}" for j in range(d)], cheap="cheap", expensive="expensive",
        id_column="id", standardize=False,
    )
    base.update(overrides)
    return SchemaConfig(**base)


def true_top_n(data: Dataset, N: int) -> np.ndarray:
    """Row positions of the N largest expensive scores (ties to the lower row)."""
    if not 1 <= N <= data.n:
        raise ValueError(f"N={N} must lie in [1, {data.n}]")
    order = np.lexsort((np.arange(data.n), -data.expensive))
    return order[:N]


def validate(path, schema: SchemaConfig) -> dict:
    """Load ``path`` and return summary statistics; raises on any problem."""
    data = load_dataset(path, schema)
    corr = float(np.corrcoef(data.cheap, data.expensive)[0, 1]) if data.n > 1 else math.nan
    return {
        "rows": data.n,
        "features": data.d,
        "cheap_mean": float(data.cheap.mean()),
        "cheap_sd": float(data.cheap.std()),
        "expensive_mean": float(data.expensive.mean()),
        "expensive_sd": float(data.expensive.std()),
        "cheap_expensive_corr": corr,
    }
