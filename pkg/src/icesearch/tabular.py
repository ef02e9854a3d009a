"""Tabular data ingestion and preprocessing.

Loading CSVs into a :class:`Dataset`, median imputation, SMOTE class
balancing and seeded stratified fold / hold-out assignment.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

NUMERIC = "numeric"
CATEGORICAL = "categorical"
MISSING_TOKENS = frozenset({"", "na", "nan"})


class DataError(ValueError):
    """Raised when input data violates a preprocessing precondition."""


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Numeric feature matrix with a binary target.

    ``X`` may hold NaN as the missing marker until :func:`impute_median`
    has been applied. Integer-coded categorical columns are listed in
    ``columns`` as ``"categorical"``.
    """

    feature_names: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    columns: tuple[str, ...] = ()
    task_description: str = ""
    categories: dict = field(default_factory=dict)

    def __post_init__(self):
        names = tuple(str(n) for n in self.feature_names)
        X = _frozen(self.X, float)
        y = _frozen(self.y, np.int64)
        if X.ndim != 2:
            X = _frozen(X.reshape(len(y), -1), float)
        columns = tuple(self.columns) or (NUMERIC,) * len(names)
        if X.shape[1] != len(names):
            raise DataError(f"X has {X.shape[1]} columns but {len(names)} feature names were given")
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique")
        if len(columns) != len(names):
            raise DataError("one column kind per feature is required")
        if bad := set(columns) - {NUMERIC, CATEGORICAL}:
            raise DataError(f"unknown column kinds: {sorted(bad)}")
        if y.shape != (X.shape[0],):
            raise DataError("y must hold exactly one label per row")
        if y.size and not np.isin(y, (0, 1)).all():
            raise DataError("y must contain only 0 and 1")
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "columns", columns)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array([c == CATEGORICAL for c in self.columns], dtype=bool)

    def class_counts(self) -> tuple[int, int]:
        n1 = int(self.y.sum())
        return self.n_samples - n1, n1

    def has_missing(self) -> bool:
        return bool(np.isnan(self.X).any())

    def take(self, rows) -> "Dataset":
        """Row subset, preserving metadata."""
        rows = np.asarray(rows)
        return replace(self, X=self.X[rows], y=self.y[rows])

    def names_of(self, subset) -> list[str]:
        return [self.feature_names[i] for i in subset]


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_of_row: np.ndarray
    n_folds: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "fold_of_row", _frozen(self.fold_of_row, np.int64))

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(train_rows, val_rows)`` for one fold."""
        in_fold = self.fold_of_row == fold
        return np.flatnonzero(~in_fold), np.flatnonzero(in_fold)

    def key(self) -> tuple:
        return (self.n_folds, self.seed, self.fold_of_row.tobytes())


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


def _parse_float(cell: str):
    try:
        return float(cell)
    except ValueError:
        return None


def load_csv(path, target_column: str, task_description: str = "") -> Dataset:
    """Read a comma-separated file with a header row into a Dataset.

    The target is mapped to {0, 1} with the lexicographically smaller value
    as 0. Feature columns holding any non-numeric cell are integer-coded by
    first appearance. Empty cells and ``NA``/``nan`` become NaN.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such data file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if target_column not in header:
        raise DataError(f"target column {target_column!r} not in header")
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(r)}")

    t = header.index(target_column)
    target = [r[t].strip() for r in body]
    levels = sorted(set(target))
    if len(levels) != 2:
        raise DataError(f"target column must have exactly 2 distinct values, found {len(levels)}")
    y = [levels.index(v) for v in target]

    names, kinds, cols, categories = [], [], [], {}
    for j, name in enumerate(header):
        if j == t:
            continue
        cells = [r[j].strip() for r in body]
        parsed = [None if _is_missing(c) else _parse_float(c) for c in cells]
        numeric = all(p is not None for p, c in zip(parsed, cells) if not _is_missing(c))
        if numeric:
            col = [math.nan if p is None else p for p in parsed]
            kinds.append(NUMERIC)
        else:
            codes: dict[str, int] = {}
            col = []
            for c in cells:
                if _is_missing(c):
                    col.append(math.nan)
                else:
                    col.append(float(codes.setdefault(c, len(codes))))
            categories[name] = list(codes)
            kinds.append(CATEGORICAL)
        names.append(name)
        cols.append(col)

    X = np.array(cols, dtype=float).T if cols else np.empty((len(body), 0))
    return Dataset(tuple(names), X.reshape(len(body), len(names)), np.array(y),
                   tuple(kinds), task_description, categories)


def _round_half_up(a):
    return np.floor(np.asarray(a, dtype=float) + 0.5)


def impute_median(dataset: Dataset) -> Dataset:
    """Replace NaN cells by their column median.

    Categorical medians are rounded half-up so they remain valid codes;
    fully missing columns are filled with 0.
    """
    if not dataset.has_missing():
        return dataset
    X = np.array(dataset.X)
    for j in range(X.shape[1]):
        miss = np.isnan(X[:, j])
        if not miss.any():
            continue
        if miss.all():
            fill = 0.0
        else:
            fill = float(np.median(X[~miss, j]))
            if dataset.columns[j] == CATEGORICAL:
                fill = float(_round_half_up(fill))
        X[miss, j] = fill
    return replace(dataset, X=X)


def _standardize(X: np.ndarray) -> np.ndarray:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - mu) / sd


class SmoteSamples(NamedTuple):
    X: np.ndarray
    label: int
    base: np.ndarray
    neighbour: np.ndarray


def smote_samples(dataset: Dataset, k: int = 5, seed: int = 0) -> SmoteSamples:
    """Synthetic minority rows needed to balance ``dataset``.

    Each row is ``x + u * (x' - x)`` with ``x`` a random minority row, ``x'``
    one of its ``k`` nearest minority neighbours on standardized columns and
    ``u`` uniform in [0, 1). ``base`` / ``neighbour`` index the parent rows
    in ``dataset``. Categorical columns are rounded to the nearest code.
    """
    if dataset.has_missing():
        raise DataError("impute missing values before SMOTE")
    n0, n1 = dataset.class_counts()
    if n0 == 0 or n1 == 0:
        raise DataError("both classes must be present")
    minority = 1 if n1 < n0 else 0
    n_new = abs(n0 - n1)
    empty = np.empty(0, dtype=np.int64)
    if n_new == 0:
        return SmoteSamples(np.empty((0, dataset.n_features)), minority, empty, empty)
    rows = np.flatnonzero(dataset.y == minority)
    m = rows.size
    if m < 2:
        raise DataError("SMOTE needs at least 2 minority rows")
    if k < 1:
        raise DataError("k must be >= 1")

    Z = _standardize(dataset.X)[rows]
    kk = min(k, m - 1)
    _, nn = cKDTree(Z).query(Z, k=kk + 1)
    nn = np.asarray(nn).reshape(m, kk + 1)
    neighbours = np.empty((m, kk), dtype=np.int64)
    for i in range(m):
        # drop self; with duplicate points self need not come first
        others = nn[i][nn[i] != i]
        neighbours[i] = others[:kk]

    rng = np.random.default_rng(seed)
    base = rng.integers(0, m, size=n_new)
    pick = neighbours[base, rng.integers(0, kk, size=n_new)]
    u = rng.random(n_new)[:, None]
    Xm = dataset.X[rows]
    synth = Xm[base] + u * (Xm[pick] - Xm[base])
    cat = dataset.categorical_mask
    if cat.any():
        synth[:, cat] = _round_half_up(synth[:, cat])
    return SmoteSamples(synth, minority, rows[base], rows[pick])


def smote_balance(dataset: Dataset, k: int = 5, seed: int = 0) -> Dataset:
    """Oversample the minority class with SMOTE until both classes are equal.

    Original rows are kept unchanged as a prefix; synthetic rows are appended.
    """
    s = smote_samples(dataset, k, seed)
    if s.X.shape[0] == 0:
        return dataset
    X = np.vstack([dataset.X, s.X])
    y = np.concatenate([dataset.y, np.full(s.X.shape[0], s.label)])
    return replace(dataset, X=X, y=y)


def _class_rows(y: np.ndarray, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.permutation(np.flatnonzero(y == c)) for c in (0, 1)]


def stratified_folds(dataset: Dataset, n_folds: int = 10, seed: int = 0) -> FoldAssignment:
    """Per-class seeded shuffle followed by round-robin fold assignment.

    The round robin continues across classes, so fold sizes also differ by
    at most one.
    """
    if n_folds < 2:
        raise DataError("n_folds must be >= 2")
    for c, n in enumerate(dataset.class_counts()):
        if n < n_folds:
            raise DataError(f"class {c} has {n} rows, fewer than {n_folds} folds")
    fold_of_row = np.empty(dataset.n_samples, dtype=np.int64)
    offset = 0
    for rows in _class_rows(dataset.y, seed):
        fold_of_row[rows] = (np.arange(rows.size) + offset) % n_folds
        offset = (offset + rows.size) % n_folds
    return FoldAssignment(fold_of_row, n_folds, seed)


def train_test_split(dataset: Dataset, test_fraction: float = 0.3,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded stratified hold-out split; returns ``(train, test)``."""
    if not 0 < test_fraction < 1:
        raise DataError("test_fraction must lie in (0, 1)")
    test = []
    for rows in _class_rows(dataset.y, seed):
        n_test = int(_round_half_up(rows.size * test_fraction))
        if rows.size and not 0 < n_test < rows.size:
            raise DataError("each class needs rows on both sides of the split")
        test.append(rows[:n_test])
    test_rows = np.sort(np.concatenate(test))
    mask = np.ones(dataset.n_samples, dtype=bool)
    mask[test_rows] = False
    return dataset.take(np.flatnonzero(mask)), dataset.take(test_rows)


def make_dataset(X: Sequence, y: Sequence, feature_names: Sequence[str] | None = None,
                 task_description: str = "", columns: Sequence[str] = ()) -> Dataset:
    X = np.asarray(X, dtype=float)
    if feature_names is None:
        feature_names = [f"x{j}" for j in range(X.shape[1])]
    return Dataset(tuple(feature_names), X, np.asarray(y), tuple(columns), task_description)
