"""The in-context evolutionary search loop.

A pool of scored feature subsets is seeded from classical rankers plus the
best of several zero-shot model proposals. Each epoch, the model is asked
once per role (with the scored pool in its prompt) for a new subset; every
proposal is scored by cross-validation, then the pool is cut back to its
best ``n_top`` and worst ``n_bottom`` members.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .lmops import (DEFAULT_ROLES, ZERO_SHOT_ROLE, CallInfo, PromptSpec, RoleSet,
                    Transcript, UnparseableResponse, build_few_shot_prompt, build_zero_shot_prompt, parse_feature_set)
from .models import CrossValidator, Evaluation, ModelSpec
from .subsets import FeatureSet, as_feature_set
from .tabular import Dataset, stratified_folds

log = logging.getLogger(__name__)

SELECTION_MODES = ("argmax_val", "decision_randomized", "decision_randomized_excluding_first")


@dataclass(frozen=True)
class Candidate:
    subset: FeatureSet
    evaluation: Evaluation
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "subset", as_feature_set(self.subset))
        if self.evaluation is None:
            raise ValueError("candidate needs an evaluation")

    @property
    def train_accuracy(self) -> float:
        return self.evaluation.train_accuracy

    @property
    def val_accuracy(self) -> float:
        return self.evaluation.val_accuracy

    def sort_key(self) -> tuple:
        """Best first: higher val, then lower train, then smaller, then lexicographic."""
        return (-self.val_accuracy, self.train_accuracy, len(self.subset), self.subset)


class Pool:
    """Population of candidates, unique by subset.

    Iteration and indexing follow the ranking order of :meth:`Candidate.sort_key`.
    """

    def __init__(self, candidates: Sequence[Candidate] = ()):
        self._members: dict[FeatureSet, Candidate] = {}
        for c in candidates:
            self.add(c)

    def add(self, candidate: Candidate) -> bool:
        """Insert unless the subset is already present; returns whether it was new."""
        if candidate.subset in self._members:
            return False
        self._members[candidate.subset] = candidate
        return True

    def ranked(self) -> list[Candidate]:
        return sorted(self._members.values(), key=Candidate.sort_key)

    def __iter__(self):
        return iter(self.ranked())

    def __getitem__(self, i):
        return self.ranked()[i]

    def __len__(self):
        return len(self._members)

    def __contains__(self, subset) -> bool:
        return as_feature_set(subset) in self._members

    def subsets(self) -> list[FeatureSet]:
        return [c.subset for c in self.ranked()]

    def copy(self) -> "Pool":
        return Pool(self._members.values())

    def snapshot(self, feature_names: Sequence[str]) -> tuple:
        """(names, train %, val %) per member, best first, for few-shot prompts."""
        return tuple(([feature_names[i] for i in c.subset],
                      100.0 * c.train_accuracy, 100.0 * c.val_accuracy) for c in self.ranked())


@dataclass(frozen=True)
class EngineConfig:
    n_zero_shot: int = 5
    n_top: int = 5
    n_bottom: int = 3
    n_epochs: int = 8
    n_folds: int = 10
    roles: tuple[str, ...] = DEFAULT_ROLES
    seed: int = 42
    selection_mode: str = "argmax_val"
    max_reprompts: int = 2
    zero_shot_role: str = ZERO_SHOT_ROLE
    max_workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "roles", RoleSet(tuple(self.roles)).roles)
        checks = {"n_top": self.n_top >= 1, "n_bottom": self.n_bottom >= 0,
                  "n_epochs": self.n_epochs >= 1, "n_folds": self.n_folds >= 2,
                  "n_zero_shot": self.n_zero_shot >= 1, "max_reprompts": self.max_reprompts >= 0,
                  "max_workers": self.max_workers >= 1}
        if bad := [k for k, ok in checks.items() if not ok]:
            raise ValueError(f"invalid engine settings: {', '.join(bad)}")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class TraceEntry:
    epoch: int
    mean_train_accuracy: float
    mean_val_accuracy: float
    pool_size: int


@dataclass
class ConvergenceTrace:
    """Mean train/val accuracy of the top ``n_top`` pool members after each epoch."""

    entries: list[TraceEntry] = field(default_factory=list)

    def record(self, epoch: int, pool: Pool, n_top: int) -> TraceEntry:
        top = pool.ranked()[:n_top]
        entry = TraceEntry(epoch, float(np.mean([c.train_accuracy for c in top])),
                           float(np.mean([c.val_accuracy for c in top])), len(pool))
        self.entries.append(entry)
        return entry

    def is_monotone(self, n_top: int | None = None) -> bool:
        """Whether the top-k mean validation accuracy never decreases.

        With ``n_top`` given, steps that start from a pool smaller than
        ``n_top`` are exempt: newcomers then join the top slice even when
        they are worse than every member.
        """
        pairs = zip(self.entries, self.entries[1:])
        return all(b.mean_val_accuracy >= a.mean_val_accuracy for a, b in pairs
                   if n_top is None or a.pool_size >= n_top)

    def __len__(self):
        return len(self.entries)

    def to_csv(self) -> str:
        lines = ["epoch,mean_train_accuracy,mean_val_accuracy,pool_size"]
        lines += [f"{e.epoch},{e.mean_train_accuracy!r},{e.mean_val_accuracy!r},{e.pool_size}"
                  for e in self.entries]
        return "\n".join(lines) + "\n"


class SearchResult(NamedTuple):
    winner: Candidate
    pool: Pool
    trace: ConvergenceTrace


def _propose(operator, prompt: str, call: CallInfo, feature_names, transcript,
             max_reprompts: int) -> FeatureSet | None:
    """Ask the operator, re-prompting on failures; None once the budget is spent."""
    for attempt in range(max_reprompts + 1):
        c = CallInfo(call.seed, call.epoch, call.role_index, call.role, call.ordinal, attempt)
        exchange = operator.ask(prompt, c)
        parsed = None
        if exchange.error is None:
            try:
                parsed = parse_feature_set(exchange.text, feature_names)
            except UnparseableResponse as exc:
                log.info("call %s: %s", c.key(), exc)
        else:
            log.info("call %s failed: %s", c.key(), exchange.error)
        if transcript is not None:
            transcript.add(c, prompt, exchange, parsed)
        if parsed is not None:
            return parsed
    log.warning("role %r skipped in epoch %d after %d attempts", call.role, call.epoch,
                max_reprompts + 1)
    return None


def _classical_items(classical) -> list[tuple[str, FeatureSet]]:
    if isinstance(classical, Mapping):
        return [(f"classical:{k}", as_feature_set(v)) for k, v in classical.items()]
    return [(f"classical:{i}", as_feature_set(v)) for i, v in enumerate(classical)]


def initialize(dataset: Dataset, config: EngineConfig, classical, operator,
               validator: CrossValidator, transcript: Transcript | None = None) -> Pool:
    """Score the classical subsets and add the best of ``n_zero_shot`` zero-shot proposals."""
    items = _classical_items(classical)
    if not items:
        raise ValueError("at least one classical feature set is required")
    pool = Pool()
    for provenance, subset in items:
        pool.add(Candidate(subset, validator.evaluate(subset), provenance))

    prompt = build_zero_shot_prompt(PromptSpec(dataset.task_description, dataset.feature_names,
                                               role=config.zero_shot_role))
    drawn = []
    for i in range(config.n_zero_shot):
        call = CallInfo(config.seed, 0, i, config.zero_shot_role, i)
        subset = _propose(operator, prompt, call, dataset.feature_names, transcript,
                          config.max_reprompts)
        if subset is not None:
            drawn.append(Candidate(subset, validator.evaluate(subset), "zero_shot"))
    if drawn:
        pool.add(min(drawn, key=Candidate.sort_key))
    else:
        log.warning("every zero-shot draw failed; starting from the classical subsets only")
    return pool


def filtrate(pool: Pool, n_top: int, n_bottom: int) -> Pool:
    """Keep the ``n_top`` best and ``n_bottom`` worst candidates."""
    ranked = pool.ranked()
    if n_top + n_bottom >= len(ranked):
        return Pool(ranked)
    return Pool(ranked[:n_top] + ranked[len(ranked) - n_bottom:])


def evolve_epoch(pool: Pool, dataset: Dataset, config: EngineConfig, operator, epoch_index: int,
                 validator: CrossValidator, transcript: Transcript | None = None,
                 trace: ConvergenceTrace | None = None) -> Pool:
    """One round of role-played proposals followed by filtration.

    The few-shot prompt is built once from the pool as it stood when the
    epoch started; proposals are inserted in role order whatever the thread
    schedule.
    """
    snapshot = pool.snapshot(dataset.feature_names)
    base_ordinal = config.n_zero_shot + (epoch_index - 1) * len(config.roles)

    def one_role(args):
        r, role = args
        prompt = build_few_shot_prompt(PromptSpec(dataset.task_description, dataset.feature_names,
                                                  snapshot, role))
        call = CallInfo(config.seed, epoch_index, r, role, base_ordinal + r)
        subset = _propose(operator, prompt, call, dataset.feature_names, transcript,
                          config.max_reprompts)
        if subset is None:
            return None
        return Candidate(subset, validator.evaluate(subset), f"role:{role}@{epoch_index}")

    jobs = list(enumerate(config.roles))
    if config.max_workers > 1:
        with ThreadPoolExecutor(config.max_workers) as ex:
            proposals = list(ex.map(one_role, jobs))
    else:
        proposals = [one_role(j) for j in jobs]

    grown = pool.copy()
    for cand in proposals:
        if cand is not None:
            grown.add(cand)
    out = filtrate(grown, config.n_top, config.n_bottom)
    if trace is not None:
        trace.record(epoch_index, out, config.n_top)
    return out


def final_select(pool: Pool, mode: str = "argmax_val", seed: int = 0, n_top: int = 5) -> Candidate:
    """Pick the winner: validation argmax, or a seeded uniform draw from the top slice."""
    ranked = pool.ranked()
    if not ranked:
        raise ValueError("cannot select from an empty pool")
    if mode == "argmax_val":
        return ranked[0]
    top = ranked[:n_top]
    if mode == "decision_randomized":
        choices = top
    elif mode == "decision_randomized_excluding_first":
        choices = top[1:]
        if not choices:
            raise ValueError("excluding the first choice leaves nothing to draw from")
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    rng = np.random.default_rng(seed)
    return choices[int(rng.integers(len(choices)))]


def run(dataset: Dataset, config: EngineConfig, operator, model_spec: ModelSpec, *,
        classical=None, validator: CrossValidator | None = None,
        transcript: Transcript | None = None) -> SearchResult:
    """Full search: initialise, evolve for ``n_epochs``, select the winner.

    ``classical`` defaults to the four classical rankers' subsets; pass a
    list or mapping of subsets to seed the pool differently. ``validator``
    lets callers share the evaluation cache (and folds) with an oracle.
    """
    if validator is None:
        folds = stratified_folds(dataset, config.n_folds, config.seed)
        validator = CrossValidator(dataset, model_spec, folds)
    if classical is None:
        from .baselines import classical_subsets
        classical = classical_subsets(dataset, seed=config.seed)

    pool = initialize(dataset, config, classical, operator, validator, transcript)
    trace = ConvergenceTrace()
    for epoch in range(1, config.n_epochs + 1):
        pool = evolve_epoch(pool, dataset, config, operator, epoch, validator, transcript, trace)
        log.info("epoch %d: top-%d mean val %.4f, pool %d", epoch, config.n_top,
                 trace.entries[-1].mean_val_accuracy, len(pool))
    if not trace.is_monotone(config.n_top):
        log.warning("top-%d mean validation accuracy decreased across epochs", config.n_top)
    winner = final_select(pool, config.selection_mode, config.seed, config.n_top)
    return SearchResult(winner, pool, trace)


def evaluate_candidates(subsets, validator: CrossValidator, provenance: str = "") -> list[Candidate]:
    return [Candidate(s, validator.evaluate(s), provenance) for s in subsets]
