"""Dataset container, CSV ingestion, splitting and standardization."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from matchml.rng import generator


class DataError(ValueError):
    """Malformed or invalid input data."""


class StratificationError(DataError):
    """A treatment level could not be represented in every part of a split."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed triple ``(Y, X, T)`` with treatments coded ``1..M``.

    ``labels`` maps each internal level to its original label (as read from
    the source), so reports can use the user's coding.
    """

    covariates: np.ndarray
    outcomes: np.ndarray
    treatments: np.ndarray
    n_levels: int = 0
    labels: dict = field(default_factory=dict)
    covariate_names: tuple = ()
    require_all_levels: bool = True

    def __post_init__(self):
        X = np.array(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.array(self.outcomes, dtype=float).ravel()
        T = np.asarray(self.treatments)
        if T.size and not np.all(np.equal(np.mod(T, 1), 0)):
            raise DataError("treatments must be integer-valued")
        T = T.astype(np.int64).ravel()
        if X.ndim != 2:
            raise DataError("covariates must be a 2-D matrix")
        n = X.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one row")
        if y.shape[0] != n or T.shape[0] != n:
            raise DataError(
                f"row counts differ: covariates {n}, outcomes {y.shape[0]}, treatments {T.shape[0]}"
            )
        bad = np.argwhere(~np.isfinite(X))
        if bad.size:
            r, c = bad[0]
            raise DataError(f"non-finite covariate at row {r}, column {c}")
        bad = np.flatnonzero(~np.isfinite(y))
        if bad.size:
            raise DataError(f"non-finite outcome at row {bad[0]}")
        M = int(self.n_levels) or int(T.max())
        if T.min() < 1 or T.max() > M:
            raise DataError(f"treatment values must lie in 1..{M}")
        if self.require_all_levels:
            missing = sorted(set(range(1, M + 1)) - set(np.unique(T).tolist()))
            if missing:
                raise DataError(f"treatment levels {missing} have no units")
        X.setflags(write=False)
        y.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "treatments", T)
        object.__setattr__(self, "n_levels", M)
        if not self.labels:
            object.__setattr__(self, "labels", {m: m for m in range(1, M + 1)})
        if not self.covariate_names:
            object.__setattr__(
                self, "covariate_names", tuple(f"x{j + 1}" for j in range(X.shape[1]))
            )

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def M(self) -> int:
        return self.n_levels

    def level_of(self, label) -> int:
        """Internal level for an original treatment label."""
        for level, lab in self.labels.items():
            if lab == label or str(lab) == str(label):
                return level
        raise DataError(f"unknown treatment label {label!r}; known: {list(self.labels.values())}")

    def subset(self, rows, require_all_levels: bool = False) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.covariates[rows],
            self.outcomes[rows],
            self.treatments[rows],
            n_levels=self.n_levels,
            labels=dict(self.labels),
            covariate_names=self.covariate_names,
            require_all_levels=require_all_levels,
        )


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"non-numeric value {cell!r} at row {row}, column {col!r}") from None
    if not math.isfinite(v):
        raise DataError(f"non-finite value {cell!r} at row {row}, column {col!r}")
    return v


def _label_sort_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def read_table(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(
                    f"{path}: row {lineno} has {len(rec)} cells, header has {len(header)}"
                )
            rows.append([c.strip() for c in rec])
    return header, rows


def load_csv(path, outcome_col: str, treatment_col: str, exclude: Sequence[str] = ()) -> Dataset:
    """Read a CSV with a header row into a validated :class:`Dataset`.

    Every column other than the outcome, the treatment and ``exclude`` is a
    covariate, in file order.  Row numbers in error messages are 1-based file
    lines (the header is line 1).  Treatment labels are remapped to
    ``1..M`` in sorted order; ``Dataset.labels`` keeps the original labels.
    """
    header, rows = read_table(path)
    for col in (outcome_col, treatment_col):
        if col not in header:
            raise DataError(f"{path}: missing column {col!r}; have {header}")
    if not rows:
        raise DataError(f"{path}: no data rows")
    yi, ti = header.index(outcome_col), header.index(treatment_col)
    cov_idx = [j for j, h in enumerate(header) if j not in (yi, ti) and h not in exclude]
    X = np.empty((len(rows), len(cov_idx)))
    y = np.empty(len(rows))
    raw_t = []
    for r, rec in enumerate(rows):
        line = r + 2
        y[r] = _parse_float(rec[yi], line, outcome_col)
        if rec[ti] == "":
            raise DataError(f"missing value at row {line}, column {treatment_col!r}")
        raw_t.append(rec[ti])
        for k, j in enumerate(cov_idx):
            X[r, k] = _parse_float(rec[j], line, header[j])
    levels = sorted(set(raw_t), key=_label_sort_key)
    if len(levels) < 2:
        raise DataError(f"{path}: only one treatment level ({levels[0]!r}) in column {treatment_col!r}")
    code = {lab: m + 1 for m, lab in enumerate(levels)}
    T = np.array([code[v] for v in raw_t])
    labels = {}
    for lab, m in code.items():
        try:
            num = float(lab)
            labels[m] = int(num) if num.is_integer() else num
        except ValueError:
            labels[m] = lab
    return Dataset(X, y, T, n_levels=len(levels), labels=labels,
                   covariate_names=tuple(header[j] for j in cov_idx))


def write_csv(ds: Dataset, path, outcome_col: str = "y", treatment_col: str = "t") -> None:
    """Write ``ds`` so that :func:`load_csv` reproduces it exactly."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([outcome_col, treatment_col, *ds.covariate_names])
        for i in range(ds.n):
            w.writerow([repr(float(ds.outcomes[i])), ds.labels[int(ds.treatments[i])],
                        *(repr(float(v)) for v in ds.covariates[i])])


@dataclass(frozen=True)
class SplitPlan:
    train_indices: np.ndarray
    match_indices: np.ndarray
    seed: int
    fraction: float
    stratified: bool = False


def _train_size(n: int, fraction: float) -> int:
    return min(max(int(math.floor(fraction * n + 0.5)), 1), n - 1)


def _levels_in(T, idx, M):
    return set(np.unique(T[idx]).tolist()) >= set(range(1, M + 1))


def _stratified(T, M, n_train, rng):
    """Per-level allocation whose total is exactly ``n_train``."""
    counts = np.array([(T == m).sum() for m in range(1, M + 1)])
    target = counts * n_train / counts.sum()
    lo = np.where(counts >= 2, 1, 0)
    hi = np.where(counts >= 2, counts - 1, counts)
    alloc = np.clip(np.floor(target).astype(int), lo, hi)
    # largest-remainder adjustment within [lo, hi]
    order = np.argsort(-(target - np.floor(target)), kind="stable")
    while alloc.sum() != n_train:
        step = 1 if alloc.sum() < n_train else -1
        moved = False
        for m in order if step > 0 else order[::-1]:
            if lo[m] <= alloc[m] + step <= hi[m]:
                alloc[m] += step
                moved = True
                if alloc.sum() == n_train:
                    break
        if not moved:
            raise StratificationError(
                f"cannot place every treatment level in both parts with {n_train} of "
                f"{T.shape[0]} units in training; use a fraction closer to 0.5"
            )
    train = []
    for m in range(1, M + 1):
        members = np.flatnonzero(T == m)
        train.append(rng.permutation(members)[: alloc[m - 1]])
    train = np.sort(np.concatenate(train))
    match = np.setdiff1d(np.arange(T.shape[0]), train)
    return train, match


def split(ds: Dataset, fraction: float, seed: int, stratify: bool = False) -> SplitPlan:
    """Random train/match partition with ``round(fraction * n)`` training units.

    If a treatment level ends up missing from either part, the split is
    redrawn once stratified by treatment.  Levels with a single unit cannot
    appear on both sides; that case warns instead of failing.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if ds.n < 2:
        raise DataError("split needs at least two units")
    rng = generator(seed, 0)
    n_train = _train_size(ds.n, fraction)
    T, M = ds.treatments, ds.M
    if not stratify:
        perm = rng.permutation(ds.n)
        train, match = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        if _levels_in(T, train, M) and _levels_in(T, match, M):
            return SplitPlan(train, match, seed, fraction)
    train, match = _stratified(T, M, n_train, generator(seed, 1))
    if not (_levels_in(T, train, M) and _levels_in(T, match, M)):
        counts = np.bincount(T, minlength=M + 1)[1:]
        if np.any(counts < 2):
            warnings.warn("levels with a single unit cannot appear in both parts of the split")
        else:
            raise StratificationError(
                "a treatment level is absent from one part even after stratified retry; "
                "use a fraction closer to 0.5 or more data"
            )
    return SplitPlan(train, match, seed, fraction, stratified=True)


@dataclass(frozen=True)
class FoldPlan:
    L: int
    assignments: np.ndarray  # values in 1..L
    seed: int

    def fold(self, ell: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == ell)

    def complement(self, ell: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != ell)


def kfold(ds_or_n, L: int, seed: int) -> FoldPlan:
    """Balanced random fold assignment; sizes differ by at most one."""
    n = ds_or_n if isinstance(ds_or_n, (int, np.integer)) else ds_or_n.n
    if L < 2:
        raise ValueError("need at least two folds")
    if L > n:
        raise ValueError(f"cannot make {L} folds from {n} units")
    perm = generator(seed, 2).permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    assignments[perm] = np.arange(n) % L + 1
    return FoldPlan(L, assignments, seed)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def invert(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.array(d["mean"], dtype=float), np.array(d["scale"], dtype=float))


def fit_standardizer(ds_or_X, rows=None, names: Sequence[str] | None = None) -> Standardizer:
    """Column means and sample (ddof=1) standard deviations over ``rows``."""
    if isinstance(ds_or_X, Dataset):
        X, names = ds_or_X.covariates, names or ds_or_X.covariate_names
    else:
        X = np.asarray(ds_or_X, dtype=float)
    if rows is not None:
        X = X[np.asarray(rows)]
    if X.shape[0] < 2:
        raise DataError("standardizer needs at least two rows")
    mean = X.mean(axis=0)
    scale = X.std(axis=0, ddof=1)
    const = np.flatnonzero(~(scale > 0))
    if const.size:
        j = int(const[0])
        label = names[j] if names else f"column {j}"
        raise DataError(f"constant covariate {label!r} cannot be standardized")
    return Standardizer(mean, scale)


def apply_standardizer(s: Standardizer, X) -> np.ndarray:
    return s.apply(X)
