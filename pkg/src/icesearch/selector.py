"""scikit-learn feature selector wrapping the evolutionary search."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from .evolution import EngineConfig, run
from .lmops import DEFAULT_ROLES, ZERO_SHOT_ROLE, Transcript
from .models import ModelSpec
from .tabular import make_dataset


class IceSearchSelector(SelectorMixin, BaseEstimator):
    """Select features with a language-model-driven evolutionary search.

    Parameters
    ----------
    operator : object
        Anything with ``ask(prompt, call) -> Exchange``, e.g.
        :class:`~icesearch.lmops.EndpointOperator` or
        :class:`~icesearch.lmops.ScriptedOperator`.
    model : str
        Downstream classifier kind used to score subsets.
    feature_names : list of str, optional
        Names shown to the model. Taken from DataFrame columns when omitted,
        else ``x0, x1, ...``.
    initial_subsets : list of index lists, optional
        Seeds the pool instead of the four classical rankers.

    Attributes
    ----------
    winner_ : Candidate
    pool_ : Pool
    trace_ : ConvergenceTrace
    transcript_ : Transcript
    """

    def __init__(self, operator=None, model="gradient_boosted_trees", model_params=None,
                 feature_names=None, task_description="", n_zero_shot=5, n_top=5,
                 n_bottom=3, n_epochs=8, n_folds=10, roles=DEFAULT_ROLES,
                 zero_shot_role=ZERO_SHOT_ROLE, selection_mode="argmax_val",
                 initial_subsets=None, random_state=42):
        self.operator = operator
        self.model = model
        self.model_params = model_params
        self.feature_names = feature_names
        self.task_description = task_description
        self.n_zero_shot = n_zero_shot
        self.n_top = n_top
        self.n_bottom = n_bottom
        self.n_epochs = n_epochs
        self.n_folds = n_folds
        self.roles = roles
        self.zero_shot_role = zero_shot_role
        self.selection_mode = selection_mode
        self.initial_subsets = initial_subsets
        self.random_state = random_state

    def fit(self, X, y):
        if self.operator is None:
            raise ValueError("an operator is required")
        names = self.feature_names
        if names is None and hasattr(X, "columns"):
            names = [str(c) for c in X.columns]
        X, y = check_X_y(X, y, dtype=np.float64)
        dataset = make_dataset(X, y, names, self.task_description)
        config = EngineConfig(self.n_zero_shot, self.n_top, self.n_bottom, self.n_epochs,
                              self.n_folds, tuple(self.roles), self.random_state,
                              self.selection_mode, zero_shot_role=self.zero_shot_role)
        spec = ModelSpec(self.model, dict(self.model_params or {}), self.random_state)
        self.transcript_ = Transcript()
        self.winner_, self.pool_, self.trace_ = run(
            dataset, config, self.operator, spec, classical=self.initial_subsets,
            transcript=self.transcript_)
        self.n_features_in_ = X.shape[1]
        self.feature_names_ = dataset.feature_names
        self.support_ = np.zeros(X.shape[1], dtype=bool)
        self.support_[list(self.winner_.subset)] = True
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "support_")
        return self.support_
