"""Exhaustive subset enumeration: score every non-empty feature subset and
rank them by hold-out test accuracy and by mean CV validation accuracy.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .models import CrossValidator, ModelSpec, holdout_accuracy
from .subsets import as_feature_set, from_bitmask, to_bitmask
from .tabular import Dataset, FoldAssignment

log = logging.getLogger(__name__)

MAX_FEATURES = 21
WARN_FEATURES = 15


class FeatureCapError(ValueError):
    pass


def rank_order(accuracy: np.ndarray, train_accuracy: np.ndarray | None = None) -> np.ndarray:
    """Ranks 1..M over bitmasks 1..M (entry i is mask i+1).

    Higher accuracy ranks first. With ``train_accuracy`` given, ties go to
    the lower train accuracy first (the engine's selection order). Remaining
    ties go to the smaller subset, then the lexicographically smaller tuple.
    """
    m = accuracy.size
    train = np.zeros(m) if train_accuracy is None else train_accuracy
    order = sorted(range(m), key=lambda i: (-accuracy[i], train[i], bin(i + 1).count("1"),
                                            from_bitmask(i + 1)))
    ranks = np.empty(m, dtype=np.int64)
    ranks[order] = np.arange(1, m + 1)
    return ranks


@dataclass(frozen=True, eq=False)
class RankTable:
    feature_names: tuple[str, ...]
    test_accuracy: np.ndarray
    val_accuracy: np.ndarray
    test_rank: np.ndarray
    val_rank: np.ndarray
    seed: int | None = None
    train_accuracy: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def __len__(self):
        return self.val_accuracy.size

    def _index(self, subset) -> int:
        fs = as_feature_set(subset)
        if fs[-1] >= self.n_features:
            raise KeyError(f"subset {fs} lies outside the {self.n_features}-feature universe")
        return to_bitmask(fs) - 1

    def rank_of(self, subset) -> tuple[int, int]:
        """(test_rank, val_rank) of a subset."""
        i = self._index(subset)
        return int(self.test_rank[i]), int(self.val_rank[i])

    def accuracies_of(self, subset) -> tuple[float, float]:
        i = self._index(subset)
        return float(self.test_accuracy[i]), float(self.val_accuracy[i])

    def best(self, by: str = "val"):
        ranks = self.val_rank if by == "val" else self.test_rank
        return from_bitmask(int(np.argmin(ranks)) + 1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "bitmask", "features", "test_accuracy", "val_accuracy",
                    "train_accuracy", "test_rank", "val_rank"])
        seed = "" if self.seed is None else self.seed
        for i in range(len(self)):
            subset = from_bitmask(i + 1)
            train = "" if self.train_accuracy is None else repr(float(self.train_accuracy[i]))
            w.writerow([seed, i + 1, ";".join(self.feature_names[j] for j in subset),
                        repr(float(self.test_accuracy[i])), repr(float(self.val_accuracy[i])),
                        train, int(self.test_rank[i]), int(self.val_rank[i])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, feature_names) -> list["RankTable"]:
        """Parse one or more tables (grouped by seed) written by :meth:`to_csv`."""
        rows = list(csv.DictReader(io.StringIO(text)))
        by_seed: dict = {}
        for r in rows:
            by_seed.setdefault(r["seed"], []).append(r)
        tables = []
        for seed, rs in by_seed.items():
            rs.sort(key=lambda r: int(r["bitmask"]))
            col = lambda k, t: np.array([t(r[k]) for r in rs])  # noqa: E731
            train = None
            if all(r.get("train_accuracy") for r in rs):
                train = col("train_accuracy", float)
            tables.append(cls(tuple(feature_names), col("test_accuracy", float),
                              col("val_accuracy", float), col("test_rank", int),
                              col("val_rank", int), int(seed) if seed != "" else None, train))
        return tables


def check_feature_count(n: int) -> None:
    if n > MAX_FEATURES:
        raise FeatureCapError(
            f"{n} features means {2 ** n - 1} subsets to cross-validate; exhaustive ranking is "
            f"impractical beyond {MAX_FEATURES} features")
    if n > WARN_FEATURES:
        log.warning("ranking %d subsets (%d features); this will take a long time", 2 ** n - 1, n)


def enumerate_and_rank(dataset: Dataset, model_spec: ModelSpec, folds: FoldAssignment,
                       test_split: Dataset, *, validator: CrossValidator | None = None,
                       n_jobs: int = 1, seed: int | None = None) -> RankTable:
    """Score all ``2**n - 1`` subsets and rank them.

    Validation accuracy is the CV mean from ``validator`` (shared with the
    search when given, so both see identical numbers); test accuracy comes
    from fitting on every CV row and scoring ``test_split``. Validation ties
    are ordered exactly as the engine orders candidates, so the engine's
    winner always holds the best val rank among the subsets it saw.
    """
    n = dataset.n_features
    check_feature_count(n)
    if test_split.n_features != n:
        raise ValueError("test split has a different feature count")
    if validator is None:
        validator = CrossValidator(dataset, model_spec, folds)
    masks = range(1, 2 ** n)

    def score(mask):
        subset = from_bitmask(mask)
        ev = validator.evaluate(subset)
        return (holdout_accuracy(dataset, test_split, subset, model_spec),
                ev.val_accuracy, ev.train_accuracy)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            scores = list(ex.map(score, masks))
    else:
        scores = [score(m) for m in masks]
    test = np.array([s[0] for s in scores])
    val = np.array([s[1] for s in scores])
    train = np.array([s[2] for s in scores])
    return RankTable(tuple(dataset.feature_names), test, val, rank_order(test),
                     rank_order(val, train), seed, train)


def rank_of(table: RankTable, subset) -> tuple[int, int]:
    return table.rank_of(subset)
