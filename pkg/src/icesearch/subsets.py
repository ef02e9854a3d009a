"""Canonical feature-subset representation.

A feature set is a sorted tuple of distinct column indices. Sorted tuples
hash, compare lexicographically and serialise cleanly, which is all the
search and the oracle need.
"""

from __future__ import annotations

from typing import Iterable

FeatureSet = tuple[int, ...]


def as_feature_set(features: Iterable[int], n_features: int | None = None) -> FeatureSet:
    """Return the canonical form of ``features``; raises on empty or out-of-range input."""
    fs = tuple(sorted({int(i) for i in features}))
    if not fs:
        raise ValueError("feature set must be non-empty")
    if fs[0] < 0 or (n_features is not None and fs[-1] >= n_features):
        raise ValueError(f"feature index out of range in {fs}")
    return fs


def to_bitmask(subset: Iterable[int]) -> int:
    mask = 0
    for i in subset:
        mask |= 1 << int(i)
    return mask


def from_bitmask(mask: int) -> FeatureSet:
    out, i = [], 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return tuple(out)
