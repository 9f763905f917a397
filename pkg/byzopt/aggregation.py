"""Aggregation rules and the bucketing wrapper."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .models import AggregationError, DimensionMismatchError

logger = logging.getLogger(__name__)

BASE_RULES = ("mean", "cm", "krum", "rfa")

# Largest tolerated Byzantine fraction and the order of the robustness constant
# of each rule once wrapped in bucketing.
ROBUSTNESS = {
    "mean": (0.0, "unbounded"),
    "cm": (0.5, "O(d)"),
    "krum": (0.25, "O(1)"),
    "rfa": (0.5, "O(1)"),
}


def _stack(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if len(vectors) == 0:
        raise AggregationError("cannot aggregate an empty set of vectors")
    dims = {np.shape(v) for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatchError(f"vectors have different shapes: {sorted(dims)}")
    return np.stack([np.asarray(v, dtype=float) for v in vectors])


def mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    return _stack(vectors).mean(axis=0)


def coordinate_median(vectors: Sequence[np.ndarray]) -> np.ndarray:
    return np.median(_stack(vectors), axis=0)


def krum_scores(stacked: np.ndarray, assumed_byz: int) -> np.ndarray:
    n = stacked.shape[0]
    neighbours = n - assumed_byz - 2
    if neighbours < 1:
        raise AggregationError(f"krum needs n - assumed_byz - 2 >= 1, got n={n}, assumed_byz={assumed_byz}")
    dist = cdist(stacked, stacked, metric="sqeuclidean")
    np.fill_diagonal(dist, np.inf)
    return np.sort(dist, axis=1)[:, :neighbours].sum(axis=1)


def krum(vectors: Sequence[np.ndarray], assumed_byz: int) -> np.ndarray:
    stacked = _stack(vectors)
    # argmin returns the first minimum, i.e. the lowest input index on ties.
    chosen = int(np.argmin(krum_scores(stacked, assumed_byz)))
    return stacked[chosen].copy()


def rfa_objective(z: np.ndarray, stacked: np.ndarray) -> float:
    return float(np.linalg.norm(stacked - z, axis=1).sum())


def rfa(vectors: Sequence[np.ndarray], iters: int = 8, smoothing: float = 1e-6, history: Optional[list] = None) -> np.ndarray:
    """Smoothed Weiszfeld iterations started at the mean, exactly ``iters`` of them."""
    if iters < 1:
        raise ValueError("rfa needs at least one iteration")
    if smoothing <= 0:
        raise ValueError("rfa smoothing must be positive")
    stacked = _stack(vectors)
    z = stacked.mean(axis=0)
    if history is not None:
        history.append(z.copy())
    for _ in range(iters):
        dist = np.linalg.norm(stacked - z, axis=1)
        w = 1.0 / np.maximum(smoothing, dist)
        z = (w[:, None] * stacked).sum(axis=0) / w.sum()
        if history is not None:
            history.append(z.copy())
    return z


def bucket_partition(n: int, bucket_size: int, rng: Optional[np.random.Generator]) -> List[np.ndarray]:
    """Split ``range(n)`` into ``ceil(n / s)`` buckets of a random permutation.

    ``s == 1`` keeps the input order and draws nothing; otherwise exactly one
    permutation of ``n`` is drawn.
    """
    if bucket_size < 1:
        raise ValueError("bucket_size must be at least 1")
    if bucket_size == 1:
        return [np.array([i]) for i in range(n)]
    if rng is None:
        raise ValueError("bucketing with bucket_size > 1 needs a random stream")
    order = rng.permutation(n)
    return [order[start : start + bucket_size] for start in range(0, n, bucket_size)]


def bad_bucket_count(buckets: Sequence[np.ndarray], byzantine: Sequence[int]) -> int:
    bad = set(int(b) for b in byzantine)
    return sum(1 for bucket in buckets if bad.intersection(int(i) for i in bucket))


def pairwise_variance(vectors: Sequence[np.ndarray]) -> float:
    """``1/(G(G-1)) * sum_{i != l} ||x_i - x_l||^2``; zero for a single vector."""
    stacked = _stack(vectors)
    G = stacked.shape[0]
    if G < 2:
        return 0.0
    centred = stacked - stacked.mean(axis=0)
    return float(2.0 * np.sum(centred * centred) / (G - 1))


@dataclass(frozen=True)
class Aggregator:
    base: str = "cm"
    bucket_size: int = 2
    rfa_iters: int = 8
    rfa_smoothing: float = 1e-6
    krum_byz: int = 0

    def __post_init__(self):
        if self.base not in BASE_RULES:
            raise ValueError(f"unknown aggregation rule: {self.base}")
        if self.bucket_size < 1:
            raise ValueError("bucket_size must be at least 1")
        if self.rfa_iters < 1:
            raise ValueError("rfa_iters must be at least 1")
        if self.rfa_smoothing <= 0:
            raise ValueError("rfa_smoothing must be positive")
        if self.krum_byz < 0:
            raise ValueError("krum_byz must be non-negative")

    def apply_base(self, vectors: Sequence[np.ndarray]) -> np.ndarray:
        if self.base == "mean":
            return mean(vectors)
        if self.base == "cm":
            return coordinate_median(vectors)
        if self.base == "krum":
            return krum(vectors, self.krum_byz)
        return rfa(vectors, self.rfa_iters, self.rfa_smoothing)

    def aggregate(self, vectors: Sequence[np.ndarray], rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return bucketing_aggregate(self, vectors, rng)

    def robustness_profile(self):
        """``(delta_max, c_order)`` of this rule under bucketing."""
        return ROBUSTNESS[self.base]

    def bucket_count(self, n: int) -> int:
        return math.ceil(n / self.bucket_size)

    @property
    def label(self) -> str:
        if self.bucket_size == 1:
            return self.base
        return f"{self.base}+bucketing(s={self.bucket_size})"


def bucketing_aggregate(agg: Aggregator, vectors: Sequence[np.ndarray], rng: Optional[np.random.Generator]) -> np.ndarray:
    stacked = _stack(vectors)
    buckets = bucket_partition(stacked.shape[0], agg.bucket_size, rng)
    means = [stacked[bucket].mean(axis=0) for bucket in buckets]
    logger.debug("bucketing %d inputs into %d buckets for %s", stacked.shape[0], len(means), agg.base)
    return agg.apply_base(means)


@dataclass
class Certificate:
    rule: str
    n: int
    byz: int
    delta: float
    sigma: float
    mean_error: float
    stderr: float
    pairwise_var: float
    c_hat: float
    max_bad_buckets: int


def certify(
    agg: Aggregator,
    good: int = 18,
    delta: float = 0.1,
    sigma: float = 1.0,
    dim: int = 10,
    trials: int = 200,
    seed: int = 0,
    far: float = 100.0,
) -> Certificate:
    """Empirical robustness audit.

    Each trial draws ``good`` vectors from ``N(0, sigma^2 I)`` and adds
    ``floor(delta * n)`` copies of a fixed far point, then compares the output of
    ``agg`` with the mean of the good vectors. ``c_hat`` is the mean squared error
    divided by ``delta * 2 * sigma^2 * dim`` (the expected pairwise variance).
    """
    if not 0 <= delta < 1:
        raise ValueError("delta must lie in [0, 1)")
    byz = int(math.floor(delta * good / (1.0 - delta) + 1e-12))
    n = good + byz
    rng = np.random.default_rng(seed)
    far_point = np.full(dim, far / math.sqrt(dim))
    errors = np.empty(trials)
    worst_bad = 0
    for t in range(trials):
        honest = sigma * rng.standard_normal((good, dim))
        inputs = list(honest) + [far_point] * byz
        bucket_rng = np.random.default_rng([seed, t])
        out = agg.aggregate(inputs, bucket_rng)
        errors[t] = float(np.sum((out - honest.mean(axis=0)) ** 2))
        if byz:
            buckets = bucket_partition(n, agg.bucket_size, np.random.default_rng([seed, t]))
            worst_bad = max(worst_bad, bad_bucket_count(buckets, range(good, n)))
    actual_delta = byz / n
    pair_var = 2.0 * sigma**2 * dim
    mean_error = float(errors.mean())
    c_hat = mean_error / (actual_delta * pair_var) if byz else math.nan
    logger.info("certified %s with delta=%.3f sigma=%g: mean error %.4g, c_hat %.4g", agg.label, actual_delta, sigma, mean_error, c_hat)
    return Certificate(
        rule=agg.label,
        n=n,
        byz=byz,
        delta=actual_delta,
        sigma=sigma,
        mean_error=mean_error,
        stderr=float(errors.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0,
        pairwise_var=pair_var,
        c_hat=c_hat,
        max_bad_buckets=worst_bad,
    )
