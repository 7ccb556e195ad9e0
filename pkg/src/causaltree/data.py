"""Dataset container, sample splitting, the transformed outcome and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

MAX_SPLIT_ATTEMPTS = 100


class DataError(ValueError):
    """Raised when input data violates the dataset contract."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CausalDataset:
    """Observed outcomes, binary treatments and numeric covariates.

    Parameters
    ----------
    outcomes : array of shape (N,)
    treatments : array of shape (N,)
        Exactly 0 or 1.
    covariates : array of shape (N, K)
    propensity : array of shape (N,), optional
        Known propensity scores e(X_i), each in (0, 1).
    true_cate : array of shape (N,), optional
        Simulated tau(X_i); only available for synthetic data.
    marginal_p : float, optional
        Treated share p. Defaults to the empirical share.
    """

    outcomes: np.ndarray
    treatments: np.ndarray
    covariates: np.ndarray
    propensity: Optional[np.ndarray] = None
    true_cate: Optional[np.ndarray] = None
    marginal_p: Optional[float] = None
    feature_names: tuple = field(default=())

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        w = np.asarray(self.treatments)
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.ndim != 1 or x.ndim != 2:
            raise DataError("outcomes must be 1-d and covariates 2-d")
        n = y.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one row")
        if w.shape != (n,) or x.shape[0] != n:
            raise DataError("outcomes, treatments and covariates must share length N")
        if not np.all((w == 0) | (w == 1)):
            raise DataError("treatments must be exactly 0 or 1")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise DataError("outcomes and covariates must be finite")
        object.__setattr__(self, "outcomes", _frozen(y))
        object.__setattr__(self, "treatments", _frozen(w.astype(np.int8)))
        object.__setattr__(self, "covariates", _frozen(x))

        for name in ("propensity", "true_cate"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=float)
            if v.shape != (n,):
                raise DataError(f"{name} must have length N")
            if not np.all(np.isfinite(v)):
                raise DataError(f"{name} must be finite")
            object.__setattr__(self, name, _frozen(v))
        if self.propensity is not None and not np.all((self.propensity > 0) & (self.propensity < 1)):
            raise DataError("propensity scores must lie in (0, 1)")

        p = self.marginal_p
        if p is None:
            p = float(np.mean(w))
        if not 0.0 < p < 1.0:
            raise DataError(f"marginal treated share must lie in (0, 1), got {p}")
        object.__setattr__(self, "marginal_p", float(p))

        names = tuple(self.feature_names) or tuple(f"x{k + 1}" for k in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError("feature_names must match the covariate column count")
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def k(self) -> int:
        return self.covariates.shape[1]

    def subset(self, indices) -> "CausalDataset":
        """Rows ``indices`` as a new dataset, keeping ``marginal_p``."""
        idx = np.asarray(indices, dtype=np.intp)
        return CausalDataset(
            outcomes=self.outcomes[idx],
            treatments=self.treatments[idx],
            covariates=self.covariates[idx],
            propensity=None if self.propensity is None else self.propensity[idx],
            true_cate=None if self.true_cate is None else self.true_cate[idx],
            marginal_p=self.marginal_p,
            feature_names=self.feature_names,
        )

    @classmethod
    def concat(cls, parts: Sequence["CausalDataset"]) -> "CausalDataset":
        first = parts[0]

        def cat(name):
            vals = [getattr(d, name) for d in parts]
            if any(v is None for v in vals):
                return None
            return np.concatenate(vals)

        return cls(
            outcomes=cat("outcomes"),
            treatments=cat("treatments"),
            covariates=np.vstack([d.covariates for d in parts]),
            propensity=cat("propensity"),
            true_cate=cat("true_cate"),
            marginal_p=first.marginal_p,
            feature_names=first.feature_names,
        )


@dataclass(frozen=True)
class SampleSplit:
    """Disjoint train / estimation / test index sets into a parent dataset."""

    train_indices: np.ndarray
    est_indices: np.ndarray
    test_indices: np.ndarray
    seed: int


@dataclass(frozen=True)
class ColumnSchema:
    """Column names used when reading a CSV file."""

    outcome: str
    treatment: str
    covariates: tuple
    propensity: Optional[str] = None
    true_cate: Optional[str] = None

    @classmethod
    def from_mapping(cls, m: Mapping) -> "ColumnSchema":
        covs = m.get("covariates") or ()
        if isinstance(covs, str):
            covs = [c.strip() for c in covs.split(",") if c.strip()]
        return cls(
            outcome=m["outcome"],
            treatment=m["treatment"],
            covariates=tuple(covs),
            propensity=m.get("propensity"),
            true_cate=m.get("true_cate"),
        )


def _parse_float(cell: str, column: str, row: int) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row}: column {column!r} value {cell!r} is not a number") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}: column {column!r} value {cell!r} is not finite")
    return v


def load_csv(
    path: Union[str, Path],
    schema: Union[ColumnSchema, Mapping],
    marginal_p: Optional[float] = None,
) -> CausalDataset:
    """Read a header-first, comma-delimited UTF-8 file into a dataset.

    Row numbers in error messages count data rows from 1 (the header is
    not counted). If ``schema.covariates`` is empty every column that is not
    otherwise claimed is used as a covariate.
    """
    if not isinstance(schema, ColumnSchema):
        schema = ColumnSchema.from_mapping(schema)
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        rows = [r for r in reader if r]

    claimed = {schema.outcome, schema.treatment, schema.propensity, schema.true_cate} - {None}
    covariates = schema.covariates or tuple(h for h in header if h not in claimed)
    if not covariates:
        raise DataError("at least one covariate column is required")
    wanted = [schema.outcome, schema.treatment, *covariates]
    wanted += [c for c in (schema.propensity, schema.true_cate) if c is not None]
    missing = [c for c in wanted if c not in header]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    col = {h: j for j, h in enumerate(header)}
    if not rows:
        raise DataError(f"{path}: no data rows")

    n = len(rows)
    y = np.empty(n)
    w = np.empty(n, dtype=np.int8)
    x = np.empty((n, len(covariates)))
    e = np.empty(n) if schema.propensity else None
    tau = np.empty(n) if schema.true_cate else None
    for i, r in enumerate(rows):
        row = i + 1
        if len(r) != len(header):
            raise DataError(f"row {row}: expected {len(header)} fields, found {len(r)}")
        y[i] = _parse_float(r[col[schema.outcome]], schema.outcome, row)
        wv = _parse_float(r[col[schema.treatment]], schema.treatment, row)
        if wv not in (0.0, 1.0):
            raise DataError(f"row {row}: treatment value {r[col[schema.treatment]]!r} is not 0 or 1")
        w[i] = int(wv)
        for j, c in enumerate(covariates):
            x[i, j] = _parse_float(r[col[c]], c, row)
        if e is not None:
            ev = _parse_float(r[col[schema.propensity]], schema.propensity, row)
            if not 0.0 < ev < 1.0:
                raise DataError(f"row {row}: propensity {ev} outside (0, 1)")
            e[i] = ev
        if tau is not None:
            tau[i] = _parse_float(r[col[schema.true_cate]], schema.true_cate, row)

    return CausalDataset(
        outcomes=y,
        treatments=w,
        covariates=x,
        propensity=e,
        true_cate=tau,
        marginal_p=marginal_p,
        feature_names=tuple(covariates),
    )


def split_sample(dataset: CausalDataset, fractions=(0.5, 0.5, 0.0), seed: int = 0) -> SampleSplit:
    """Uniform random train / estimation / test split without replacement.

    Set sizes are ``floor(fraction * N)``; when the fractions sum to one the
    rounding remainder goes to the training set. Every nonempty set must hold
    at least one treated and one control unit, and the permutation is redrawn
    (up to 100 times) until that holds.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or fr.sum() > 1 + 1e-12:
        raise DataError(f"fractions must be three non-negative numbers summing to at most 1, got {fractions}")
    n = dataset.n
    sizes = np.floor(fr * n + 1e-9).astype(int)
    if abs(fr.sum() - 1.0) < 1e-12:
        sizes[0] += n - sizes.sum()
    for f, s in zip(fr, sizes):
        if f > 0 and s < 2:
            raise DataError(f"fractions {tuple(fractions)} leave a set with fewer than 2 of {n} units")
    n_treat = int(dataset.treatments.sum())
    if n_treat < np.count_nonzero(sizes) or n - n_treat < np.count_nonzero(sizes):
        raise DataError("not enough treated or control units to populate every requested set")

    rng = np.random.default_rng(seed)
    bounds = np.cumsum(sizes)
    for _ in range(MAX_SPLIT_ATTEMPTS):
        perm = rng.permutation(n)
        parts = [np.sort(perm[lo:hi]) for lo, hi in zip((0, *bounds[:-1]), bounds)]
        if all(
            len(p) == 0 or 0 < dataset.treatments[p].sum() < len(p)
            for p in parts
        ):
            return SampleSplit(*parts, seed=seed)
    raise DataError(f"could not place both arms in every set after {MAX_SPLIT_ATTEMPTS} attempts")


def transformed_outcome(dataset: CausalDataset, p: Optional[float] = None) -> np.ndarray:
    """Y* = Y (W - p) / (p (1 - p)), whose conditional mean given X is the CATE."""
    p = dataset.marginal_p if p is None else p
    if not 0.0 < p < 1.0:
        raise DataError(f"p must lie in (0, 1), got {p}")
    return dataset.outcomes * (dataset.treatments - p) / (p * (1.0 - p))


def write_csv(dataset: CausalDataset, path: Union[str, Path], outcome: str = "y", treatment: str = "w",
              propensity: str = "e", true_cate: str = "tau") -> None:
    """Write ``dataset`` in the layout :func:`load_csv` reads back."""
    names = list(dataset.feature_names) or [f"x{j + 1}" for j in range(dataset.k)]
    cols = [outcome, treatment, *names]
    data = [dataset.outcomes, dataset.treatments, *dataset.covariates.T]
    for name, arr in ((propensity, dataset.propensity), (true_cate, dataset.true_cate)):
        if arr is not None:
            cols.append(name)
            data.append(arr)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for row in zip(*data):
            wr.writerow([repr(int(v)) if j == 1 else repr(float(v)) for j, v in enumerate(row)])
