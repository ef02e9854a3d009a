"""Classical feature-importance rankers used to seed the search pool."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import (DecisionTreeGini, LogisticRegressionGD, ModelSpec,
                     RandomForestGini, SingleClassError)
from .subsets import FeatureSet
from .tabular import Dataset

METHODS = ("decision_tree", "random_forest", "logistic", "fisher_score")


@dataclass(frozen=True)
class ImportanceVector:
    method: str
    scores: tuple[float, ...]

    def __post_init__(self):
        scores = tuple(float(s) for s in self.scores)
        if not all(np.isfinite(scores)) or min(scores, default=0.0) < 0:
            raise ValueError("importance scores must be finite and non-negative")
        object.__setattr__(self, "scores", scores)


def fisher_score(X, y) -> np.ndarray:
    """Per-feature Fisher score with population (biased) class variances.

    ``F_j = sum_c n_c (mu_cj - mu_j)^2 / sum_c n_c var_cj``; features with a
    zero denominator score 0.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    mu = X.mean(axis=0)
    num = np.zeros(X.shape[1])
    den = np.zeros(X.shape[1])
    for c in np.unique(y):
        Xc = X[y == c]
        nc = Xc.shape[0]
        mc = Xc.mean(axis=0)
        num += nc * (mc - mu) ** 2
        den += nc * ((Xc - mc) ** 2).mean(axis=0)
    out = np.zeros_like(num)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def feature_importances(dataset: Dataset, method: str, spec: ModelSpec | None = None,
                        seed: int = 0) -> ImportanceVector:
    """Score every feature with one of the four classical rankers.

    ``spec`` may carry hyperparameters for the underlying model when its kind
    matches the ranker (``cart_tree``, ``random_forest``,
    ``logistic_regression``); otherwise that model's defaults are used.
    """
    X, y = dataset.X, dataset.y
    if y.min(initial=1) == y.max(initial=0):
        raise SingleClassError("feature importances need both classes")

    def params(kind):
        return dict(spec.hyperparameters) if spec is not None and spec.kind == kind else {}

    if method == "decision_tree":
        scores = DecisionTreeGini(random_state=seed, **params("cart_tree")).fit(X, y).feature_importances_
    elif method == "random_forest":
        scores = RandomForestGini(random_state=seed, **params("random_forest")).fit(X, y).feature_importances_
    elif method == "logistic":
        scores = np.abs(LogisticRegressionGD(random_state=seed, **params("logistic_regression")).fit(X, y).coef_)
    elif method == "fisher_score":
        scores = fisher_score(X, y)
    else:
        raise ValueError(f"unknown importance method {method!r}")
    return ImportanceVector(method, tuple(np.maximum(scores, 0.0)))


def select_by_importance(importances: ImportanceVector, policy: str = "above_mean",
                         k: int | None = None) -> FeatureSet:
    """Turn scores into a feature set.

    ``above_mean`` keeps scores strictly above the mean and falls back to the
    single best feature; ``top_k`` keeps the k largest (ties to lower index).
    """
    scores = np.asarray(importances.scores)
    n = scores.size
    # stable sort on -score puts lower indices first among equal scores
    ranked = np.argsort(-scores, kind="stable")
    if policy == "top_k":
        if k is None or not 1 <= k <= n:
            raise ValueError(f"top_k needs 1 <= k <= {n}, got {k}")
        return tuple(sorted(int(i) for i in ranked[:k]))
    if policy != "above_mean":
        raise ValueError(f"unknown selection policy {policy!r}")
    if not (scores > 0).any():
        raise ValueError("above_mean needs at least one positive score")
    keep = np.flatnonzero(scores > scores.mean())
    if keep.size == 0:
        return (int(ranked[0]),)
    return tuple(int(i) for i in keep)


def classical_subsets(dataset: Dataset, spec: ModelSpec | None = None, seed: int = 0,
                      policy: str = "above_mean", k: int | None = None) -> dict[str, FeatureSet]:
    """Feature set chosen by each of the four classical methods, in METHODS order."""
    return {m: select_by_importance(feature_importances(dataset, m, spec, seed), policy, k)
            for m in METHODS}
