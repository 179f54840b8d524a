"""Arithmetic rating aggregators and their expanding-window tuning.

Four mechanisms: the plain sample mean, a Dirichlet-smoothed categorical
posterior mean, a sliding window over the most recent ratings, and an
exponentially discounted mean. ``tune`` picks a grid value by time-series
cross-validation where each fold holds out the next five ratings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import InvalidInputError

ALPHA_GRID = (0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
LAMBDA_GRID = (0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
FOLD_SIZE = 5
MAX_FOLDS = 5

KINDS = ("sample_mean", "weighted_mean", "sliding_window", "discounted")


@dataclass(frozen=True)
class BaselineSpec:
    """A baseline kind plus its tuned parameter (None for the sample mean)."""

    kind: str
    tuned_param: Optional[Union[int, float]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown baseline kind {self.kind!r}")
        if self.kind == "sample_mean":
            if self.tuned_param is not None:
                raise InvalidInputError("sample_mean takes no parameter")
        elif self.kind == "weighted_mean":
            if self.tuned_param not in ALPHA_GRID:
                raise InvalidInputError(f"alpha {self.tuned_param!r} not in tuning grid")
        elif self.kind == "discounted":
            if self.tuned_param not in LAMBDA_GRID:
                raise InvalidInputError(f"lambda {self.tuned_param!r} not in tuning grid")
        else:
            if not (isinstance(self.tuned_param, (int, np.integer)) and self.tuned_param >= 1):
                raise InvalidInputError("window length must be a positive integer")


def _ratings_of(history_or_ratings):
    ratings = getattr(history_or_ratings, "ratings", history_or_ratings)
    r = np.asarray(ratings, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise InvalidInputError("ratings must be a non-empty vector")
    return r


def sample_mean(history) -> float:
    """Plain average of all ratings."""
    return float(_ratings_of(history).mean())


def weighted_mean(history, alpha: float, n_r: int = None) -> float:
    """Posterior mean rating under a symmetric Dirichlet(alpha) smoother."""
    if not alpha > 0:
        raise InvalidInputError("alpha must be positive")
    r = _ratings_of(history)
    if n_r is None:
        n_r = int(r.max())
    counts = np.bincount(r.astype(int), minlength=n_r + 1)[1:].astype(float)
    levels = np.arange(1, n_r + 1)
    val = levels @ (counts + alpha) / (r.size + n_r * alpha)
    # the exact value is a convex combination of the levels; rounding in the
    # dot product can overshoot the endpoints by an ulp
    return float(min(max(val, 1.0), float(n_r)))


def sliding_window_mean(history, l: int) -> float:
    """Mean of the last l ratings in time order."""
    r = _ratings_of(history)
    if not 1 <= l <= r.size:
        raise InvalidInputError(f"window length {l} outside 1..{r.size}")
    return float(r[-int(l):].mean())


def discounted_mean(history, lam: float) -> float:
    """Exponentially discounted mean, most recent rating weighted highest."""
    if lam < 0:
        raise InvalidInputError("lambda must be non-negative")
    r = _ratings_of(history)
    n = r.size
    # age of rating j is n - j + 1; shift log-weights so the newest is 0
    logw = -lam * np.arange(n - 1, -1, -1, dtype=float)
    w = np.exp(logw)
    val = (w @ r) / w.sum()
    # convex combination of the ratings, up to dot-product rounding
    return float(min(max(val, r.min()), r.max()))


def _apply(ratings, kind, param, n_r):
    if kind == "sample_mean":
        return float(np.mean(ratings))
    if kind == "weighted_mean":
        return weighted_mean(ratings, param, n_r=n_r)
    if kind == "discounted":
        return discounted_mean(ratings, param)
    return sliding_window_mean(ratings, min(int(param), len(ratings)))


def aggregate(history, spec: BaselineSpec, n_r: int = None) -> float:
    """Evaluate a (possibly tuned) baseline on a full history."""
    r = _ratings_of(history)
    return _apply(r, spec.kind, spec.tuned_param, n_r)


def _cv_folds(ratings):
    n = ratings.size
    k_max = min(MAX_FOLDS, (n - FOLD_SIZE) // FOLD_SIZE)
    folds = []
    for k in range(1, k_max + 1):
        split = n - FOLD_SIZE * k
        folds.append((ratings[:split], float(ratings[split:split + FOLD_SIZE].mean())))
    return folds


def tune(history, kind: str, n_r: int = None) -> BaselineSpec:
    """Grid search by expanding-window CV with five-rating hold-out folds.

    Short histories (< 10 ratings) return the untuned defaults. Ties prefer
    the parameter whose behavior sits closest to the sample mean: smaller
    lambda, larger window, larger alpha.
    """
    if kind not in KINDS:
        raise InvalidInputError(f"unknown baseline kind {kind!r}")
    if kind == "sample_mean":
        return BaselineSpec("sample_mean", None)
    r = _ratings_of(history)
    n = r.size
    if kind == "weighted_mean" and n_r is None:
        n_r = int(r.max())
    if n < 10:
        defaults = {"discounted": 1.0, "weighted_mean": 1.0, "sliding_window": n}
        return BaselineSpec(kind, defaults[kind])
    folds = _cv_folds(r)
    if kind == "discounted":
        grid = list(LAMBDA_GRID)          # ascending: ties keep smaller lambda
    elif kind == "weighted_mean":
        grid = sorted(ALPHA_GRID, reverse=True)   # ties keep larger alpha
    else:
        grid = list(range(n - FOLD_SIZE, 0, -1))  # ties keep larger window
    best, best_score = None, np.inf
    for value in grid:
        score = 0.0
        for train, target in folds:
            score += abs(_apply(train, kind, value, n_r) - target)
        score /= len(folds)
        if score < best_score - 1e-12:
            best, best_score = value, score
    return BaselineSpec(kind, best)
