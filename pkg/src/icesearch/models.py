"""Downstream binary classifiers and the N-fold cross-validation scorer.

All five classifiers follow the scikit-learn estimator API (``fit`` /
``predict`` / ``get_params``) so they can be dropped into pipelines, but
they are implemented here so that results are bit-for-bit deterministic
and split ties are broken by lowest feature index, then lowest threshold.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .subsets import FeatureSet, as_feature_set
from .tabular import Dataset, FoldAssignment

_EPS = 1e-12


class SingleClassError(ValueError):
    """Training labels contain only one class."""


class EvaluationError(RuntimeError):
    """Cross-validation could not score a feature subset."""


def _check_fit_input(X, y):
    X, y = check_X_y(X, y, dtype=np.float64, ensure_min_features=0)
    if X.shape[1] == 0:
        raise ValueError("empty feature restriction: X has no columns")
    y = y.astype(np.int64)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise SingleClassError("training labels contain a single class")
    return X, y


def _check_predict_input(est, X):
    check_is_fitted(est, "n_features_in_")
    X = check_array(X, dtype=np.float64, ensure_min_samples=0, ensure_min_features=0)
    if X.shape[1] != est.n_features_in_:
        raise ValueError(f"X has {X.shape[1]} columns, model was fitted with {est.n_features_in_}")
    return X


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class _Standardizer:
    def __init__(self, X):
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        self.scale = sd

    def __call__(self, X):
        return (X - self.mean) / self.scale


# --------------------------------------------------------------------------
# trees


@dataclass
class _Tree:
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def add_leaf(self, value) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.value) - 1

    def freeze(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=float)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=float)
        return self

    def apply(self, X) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r, n = rows[inner], node[inner]
            go_left = X[r, f[inner]] <= self.threshold[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])

    def predict_value(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


def _split_threshold(lo, hi):
    thr = 0.5 * (lo + hi)
    return lo if thr >= hi else thr


def _best_gini_split(X, y, idx, features):
    """Best Gini split of rows ``idx``; returns (child impurity, feature, threshold).

    Impurities are half the count-weighted Gini, i.e. c1 * c0 / n per child.
    """
    n = idx.size
    yi = y[idx]
    total1 = yi.sum()
    nl = np.arange(1, n, dtype=float)
    nr = n - nl
    best = (math.inf, -1, 0.0)
    for j in features:
        v = X[idx, j]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        distinct = vs[1:] > vs[:-1]
        if not distinct.any():
            continue
        c1 = np.cumsum(yi[order])[:-1].astype(float)
        cr = total1 - c1
        imp = c1 * (nl - c1) / nl + cr * (nr - cr) / nr
        imp[~distinct] = math.inf
        pos = int(np.argmin(imp))
        if imp[pos] < best[0] - _EPS:
            best = (float(imp[pos]), int(j), _split_threshold(vs[pos], vs[pos + 1]))
    return best


def _grow_classification_tree(X, y, max_depth, min_samples_split, max_features, rng):
    """Greedy CART on Gini impurity.

    Impure nodes are split even at zero gain (XOR-style data needs this);
    the returned importance vector holds the total weighted impurity decrease
    per feature, normalised by the number of root rows.
    """
    n, d = X.shape
    tree = _Tree()
    importances = np.zeros(d)
    depth_cap = math.inf if max_depth is None else max_depth
    all_features = np.arange(d)
    root = tree.add_leaf(float(y.mean()))
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        m = idx.size
        c1 = int(y[idx].sum())
        if depth >= depth_cap or m < min_samples_split or c1 == 0 or c1 == m:
            continue
        if max_features is not None and max_features < d:
            features = np.sort(rng.choice(d, size=max_features, replace=False))
        else:
            features = all_features
        imp, j, thr = _best_gini_split(X, y, idx, features)
        if j < 0:
            continue
        importances[j] += 2.0 * (c1 * (m - c1) / m - imp) / n
        go_left = X[idx, j] <= thr
        li, ri = idx[go_left], idx[~go_left]
        tree.feature[node] = j
        tree.threshold[node] = thr
        tree.left[node] = tree.add_leaf(float(y[li].mean()))
        tree.right[node] = tree.add_leaf(float(y[ri].mean()))
        stack.append((tree.right[node], ri, depth + 1))
        stack.append((tree.left[node], li, depth + 1))
    return tree.freeze(), importances


class DecisionTreeGini(ClassifierMixin, BaseEstimator):
    """CART classifier grown greedily on Gini impurity."""

    def __init__(self, max_depth=None, min_samples_split=2, max_features=None, random_state=0):
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.max_features = max_features
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_fit_input(X, y)
        rng = np.random.default_rng(self.random_state)
        self.tree_, self.feature_importances_ = _grow_classification_tree(
            X, y, self.max_depth, self.min_samples_split, self.max_features, rng)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        X = _check_predict_input(self, X)
        p = self.tree_.predict_value(X)
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int64)


class RandomForestGini(ClassifierMixin, BaseEstimator):
    """Bagged Gini trees with ``ceil(sqrt(d))`` features tried per split."""

    def __init__(self, n_estimators=50, max_depth=None, min_samples_split=2, random_state=0):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_fit_input(X, y)
        n, d = X.shape
        rng = np.random.default_rng(self.random_state)
        max_features = math.ceil(math.sqrt(d))
        self.estimators_ = []
        importances = np.zeros(d)
        for _ in range(self.n_estimators):
            boot = rng.integers(0, n, size=n)
            tree, imp = _grow_classification_tree(
                X[boot], y[boot], self.max_depth, self.min_samples_split, max_features, rng)
            self.estimators_.append(tree)
            importances += imp
        self.feature_importances_ = importances / self.n_estimators
        self.n_features_in_ = d
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        X = _check_predict_input(self, X)
        p = np.zeros(X.shape[0])
        for tree in self.estimators_:
            p += tree.predict_value(X)
        p /= len(self.estimators_)
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int64)


def _best_newton_split(X, g, h, idx, min_child_weight, reg_lambda):
    G, H = g[idx].sum(), h[idx].sum()
    parent = G * G / (H + reg_lambda)
    best = (_EPS, -1, 0.0)
    for j in range(X.shape[1]):
        v = X[idx, j]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        ok = vs[1:] > vs[:-1]
        if not ok.any():
            continue
        gl = np.cumsum(g[idx][order])[:-1]
        hl = np.cumsum(h[idx][order])[:-1]
        gr, hr = G - gl, H - hl
        ok &= (hl >= min_child_weight) & (hr >= min_child_weight)
        gain = gl * gl / (hl + reg_lambda) + gr * gr / (hr + reg_lambda) - parent
        gain[~ok] = -math.inf
        pos = int(np.argmax(gain))
        if gain[pos] > best[0] + _EPS:
            best = (float(gain[pos]), j, _split_threshold(vs[pos], vs[pos + 1]))
    return best if best[1] >= 0 else None


def _grow_newton_tree(X, g, h, max_depth, min_child_weight, reg_lambda):
    tree = _Tree()

    def leaf(idx):
        return float(-g[idx].sum() / (h[idx].sum() + reg_lambda))

    root = tree.add_leaf(leaf(np.arange(X.shape[0])))
    stack = [(root, np.arange(X.shape[0]), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or idx.size < 2:
            continue
        split = _best_newton_split(X, g, h, idx, min_child_weight, reg_lambda)
        if split is None:
            continue
        _, j, thr = split
        go_left = X[idx, j] <= thr
        li, ri = idx[go_left], idx[~go_left]
        tree.feature[node] = j
        tree.threshold[node] = thr
        tree.left[node] = tree.add_leaf(leaf(li))
        tree.right[node] = tree.add_leaf(leaf(ri))
        stack.append((tree.right[node], ri, depth + 1))
        stack.append((tree.left[node], li, depth + 1))
    return tree.freeze()


class GradientBoostedTrees(ClassifierMixin, BaseEstimator):
    """Second-order boosting of depth-limited regression trees on logistic loss."""

    def __init__(self, n_rounds=50, learning_rate=0.1, max_depth=3,
                 min_child_weight=1.0, reg_lambda=1.0, random_state=0):
        self.n_rounds = n_rounds
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_child_weight = min_child_weight
        self.reg_lambda = reg_lambda
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_fit_input(X, y)
        prior = y.mean()
        self.base_score_ = float(np.log(prior / (1 - prior)))
        margin = np.full(X.shape[0], self.base_score_)
        self.estimators_ = []
        for _ in range(self.n_rounds):
            p = _sigmoid(margin)
            g, h = p - y, np.maximum(p * (1 - p), 1e-16)
            tree = _grow_newton_tree(X, g, h, self.max_depth, self.min_child_weight, self.reg_lambda)
            tree.value = tree.value * self.learning_rate
            margin += tree.predict_value(X)
            self.estimators_.append(tree)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        X = _check_predict_input(self, X)
        margin = np.full(X.shape[0], self.base_score_)
        for tree in self.estimators_:
            margin += tree.predict_value(X)
        return margin

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)


# --------------------------------------------------------------------------
# linear models


class LogisticRegressionGD(ClassifierMixin, BaseEstimator):
    """L2-penalised logistic regression fitted by full-batch gradient descent.

    Columns are standardized with training statistics; ``coef_`` is on the
    standardized scale. The step is ``min(learning_rate, 1 / L)`` with ``L``
    the Lipschitz constant of the gradient, so correlated columns cannot make
    the iteration diverge. Iteration stops early once every gradient
    component falls below ``tol``.
    """

    def __init__(self, learning_rate=2.0, epochs=500, l2=1e-3, tol=1e-5, random_state=0):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.l2 = l2
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_fit_input(X, y)
        self.scaler_ = _Standardizer(X)
        Z = self.scaler_(X)
        n, d = Z.shape
        w, b = np.zeros(d), 0.0
        yf = y.astype(float)
        # Z is centred, so the bias decouples; Hessian <= Z'Z / 4n + l2
        lipschitz = 0.25 * max(np.linalg.norm(Z, 2) ** 2 / n, 1.0) + self.l2
        step = min(self.learning_rate, 1.0 / lipschitz)
        for self.n_iter_ in range(1, self.epochs + 1):
            r = _sigmoid(Z @ w + b) - yf
            gw = Z.T @ r / n + self.l2 * w
            gb = r.mean()
            w -= step * gw
            b -= step * gb
            if max(np.abs(gw).max(), abs(gb)) < self.tol:
                break
        self.coef_, self.intercept_ = w, b
        self.n_features_in_ = d
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        X = _check_predict_input(self, X)
        return self.scaler_(X) @ self.coef_ + self.intercept_

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)


class LinearSVMSubgradient(ClassifierMixin, BaseEstimator):
    """Linear SVM trained by seeded mini-batch Pegasos on the hinge loss.

    The bias is an extra constant column and is regularised with the weights.
    """

    def __init__(self, lam=1e-4, epochs=200, batch_size=64, random_state=0):
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_fit_input(X, y)
        self.scaler_ = _Standardizer(X)
        Z = np.column_stack([self.scaler_(X), np.ones(X.shape[0])])
        s = 2.0 * y - 1.0
        n = Z.shape[0]
        rng = np.random.default_rng(self.random_state)
        w = np.zeros(Z.shape[1])
        # the last iterate oscillates; return the mean over the second half
        w_sum = np.zeros_like(w)
        n_steps = self.epochs * -(-n // self.batch_size)
        t = 0
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                batch = order[start:start + self.batch_size]
                t += 1
                eta = 1.0 / (self.lam * t)
                zb, sb = Z[batch], s[batch]
                viol = sb * (zb @ w) < 1.0
                w *= 1.0 - eta * self.lam
                if viol.any():
                    w += (eta / batch.size) * (sb[viol] @ zb[viol])
                if 2 * t > n_steps:
                    w_sum += w
        w = w_sum / (n_steps - n_steps // 2)
        self.coef_, self.intercept_ = w[:-1], float(w[-1])
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        X = _check_predict_input(self, X)
        return self.scaler_(X) @ self.coef_ + self.intercept_

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)


# --------------------------------------------------------------------------
# model specs and the CV scorer

ESTIMATORS = {
    "logistic_regression": LogisticRegressionGD,
    "cart_tree": DecisionTreeGini,
    "random_forest": RandomForestGini,
    "gradient_boosted_trees": GradientBoostedTrees,
    "linear_svm": LinearSVMSubgradient,
}


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "gradient_boosted_trees"
    hyperparameters: dict = field(default_factory=dict, hash=False)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ESTIMATORS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {sorted(ESTIMATORS)}")
        valid = ESTIMATORS[self.kind]().get_params()
        for name, value in self.hyperparameters.items():
            if name not in valid or name == "random_state":
                raise ValueError(f"{self.kind} has no hyperparameter {name!r}")
            if isinstance(value, (int, float)) and not isinstance(value, bool) and value <= 0:
                raise ValueError(f"hyperparameter {name} must be positive")

    def key(self) -> tuple:
        return (self.kind, tuple(sorted(self.hyperparameters.items())), self.seed)

    def make(self):
        return ESTIMATORS[self.kind](random_state=self.seed, **self.hyperparameters)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparameters": dict(self.hyperparameters), "seed": self.seed}


def fit(spec: ModelSpec, X, y):
    return spec.make().fit(X, y)


def predict(model, X) -> np.ndarray:
    return model.predict(X)


def accuracy(model, X, y) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(model.predict(X) == y))


@dataclass(frozen=True)
class Evaluation:
    train_accuracy: float
    val_accuracy: float
    n_folds: int


class CrossValidator:
    """Scores feature subsets by N-fold CV on a fixed dataset, model spec and folds.

    Results are memoised per canonical subset; the cache is safe to share
    between threads (a racing double-insert stores the identical value).
    """

    def __init__(self, dataset: Dataset, spec: ModelSpec, folds: FoldAssignment):
        if folds.fold_of_row.shape[0] != dataset.n_samples:
            raise ValueError("fold assignment does not match the dataset")
        self.dataset = dataset
        self.spec = spec
        self.folds = folds
        self._cache: dict[FeatureSet, Evaluation] = {}
        self._lock = threading.Lock()
        self._splits = [folds.split(i) for i in range(folds.n_folds)]

    def __len__(self):
        return len(self._cache)

    def cached(self, subset) -> Evaluation | None:
        return self._cache.get(as_feature_set(subset, self.dataset.n_features))

    def evaluate(self, subset) -> Evaluation:
        key = as_feature_set(subset, self.dataset.n_features)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        result = self._compute(key)
        with self._lock:
            return self._cache.setdefault(key, result)

    __call__ = evaluate

    def _compute(self, subset: FeatureSet) -> Evaluation:
        X = self.dataset.X[:, list(subset)]
        y = self.dataset.y
        train_acc, val_acc = [], []
        for i, (tr, va) in enumerate(self._splits):
            try:
                model = fit(self.spec, X[tr], y[tr])
            except ValueError as exc:
                raise EvaluationError(f"fold {i} of subset {subset}: {exc}") from exc
            train_acc.append(accuracy(model, X[tr], y[tr]))
            val_acc.append(accuracy(model, X[va], y[va]))
        return Evaluation(float(np.mean(train_acc)), float(np.mean(val_acc)), self.folds.n_folds)


def cross_validate(dataset: Dataset, subset, spec: ModelSpec, folds: FoldAssignment,
                   validator: CrossValidator | None = None) -> Evaluation:
    """Mean train/validation accuracy of ``spec`` on ``subset`` over ``folds``."""
    if validator is None:
        validator = CrossValidator(dataset, spec, folds)
    return validator.evaluate(subset)


def holdout_accuracy(train: Dataset, test: Dataset, subset, spec: ModelSpec) -> float:
    """Fit on all of ``train`` restricted to ``subset`` and score on ``test``."""
    cols = list(as_feature_set(subset, train.n_features))
    model = fit(spec, train.X[:, cols], train.y)
    return accuracy(model, test.X[:, cols], test.y)
