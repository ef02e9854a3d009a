"""Evolutionary feature selection with a language model as the variation operator."""

from .evolution import (Candidate, ConvergenceTrace, EngineConfig, Pool, filtrate,
                        final_select, run)
from .models import CrossValidator, Evaluation, ModelSpec, cross_validate
from .oracle import RankTable, enumerate_and_rank
from .selector import IceSearchSelector
from .tabular import Dataset, load_csv

__all__ = [
    "Candidate", "ConvergenceTrace", "CrossValidator", "Dataset", "EngineConfig",
    "Evaluation", "IceSearchSelector", "ModelSpec", "Pool", "RankTable", "cross_validate",
    "enumerate_and_rank", "filtrate", "final_select", "load_csv", "run",
]
__version__ = "0.1.0"
