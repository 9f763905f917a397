"""Losses, gradients, smoothness constants and gradient-difference estimators.

Logistic per-sample loss with labels in {0, 1}:

    f_j(x) = softplus(a_j.x) - y_j * a_j.x + reg(x)

with ``reg(x) = lam * ||x||^2`` (``logistic_l2``) or
``lam * sum_t x_t^2 / (1 + x_t^2)`` (``logistic_nonconvex``). The data term has
Hessian ``s(1-s) a a^T`` with ``s(1-s) <= 1/4`` and both regularizers have curvature
at most ``2 * lam`` per coordinate, so ``L_j = ||a_j||^2 / 4 + 2 * lam`` is a valid
Lipschitz constant of the per-sample gradient for both kinds.

The ``quadratic`` kind is a test fixture: ``features`` holds per-sample diagonal
curvatures ``h_j`` and ``targets`` the centers ``c_j``;
``f_j(x) = 1/2 * sum_t h_jt (x_t - c_jt)^2``. ``lam`` is unused there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.special import expit

from .models import DimensionMismatchError, WorkerShard

MODEL_KINDS = ("logistic_l2", "logistic_nonconvex", "quadratic")
SAMPLING_SCHEMES = ("uniform", "importance")


@dataclass(frozen=True)
class LossModel:
    kind: str = "logistic_l2"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind: {self.kind}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    @property
    def is_logistic(self) -> bool:
        return self.kind != "quadratic"

    @property
    def strong_convexity(self) -> float:
        # lam * ||x||^2 has modulus 2 * lam.
        return 2.0 * self.lam if self.kind == "logistic_l2" else 0.0


@dataclass
class SmoothnessTable:
    per_sample: List[np.ndarray]
    per_worker_mean: np.ndarray
    global_L: float


@dataclass(frozen=True)
class DeltaEstimator:
    scheme: str = "uniform"
    batch_size: int = 1

    def __post_init__(self):
        if self.scheme not in SAMPLING_SCHEMES:
            raise ValueError(f"unknown sampling scheme: {self.scheme}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class QuadraticConstants:
    L: float
    L_pm: float
    calL_pm: float
    mu: float
    x_star: np.ndarray
    f_star: float


def _check_dim(shard: WorkerShard, x: np.ndarray) -> None:
    if x.ndim != 1 or x.shape[0] != shard.dim:
        raise DimensionMismatchError(f"expected a vector of dimension {shard.dim}, got shape {x.shape}")


def _regularizer(model: LossModel, x: np.ndarray) -> float:
    if model.kind == "logistic_l2":
        return model.lam * float(x @ x)
    if model.kind == "logistic_nonconvex":
        sq = x * x
        return model.lam * float(np.sum(sq / (1.0 + sq)))
    return 0.0


def _regularizer_grad(model: LossModel, x: np.ndarray) -> np.ndarray:
    if model.kind == "logistic_l2":
        return 2.0 * model.lam * x
    if model.kind == "logistic_nonconvex":
        return model.lam * 2.0 * x / (1.0 + x * x) ** 2
    return np.zeros_like(x)


def _rows(features, idx: Optional[np.ndarray]):
    return features if idx is None else features[idx]


def _weighted_grad(
    model: LossModel,
    shard: WorkerShard,
    x: np.ndarray,
    idx: Optional[np.ndarray] = None,
    weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """``(1/len) * sum_j w_j * grad f_j(x)`` over ``idx`` (all rows when ``idx`` is None)."""
    rows = _rows(shard.features, idx)
    count = rows.shape[0]
    w = np.ones(count) if weights is None else weights
    if model.is_logistic:
        labels = shard.labels if idx is None else shard.labels[idx]
        residual = w * (expit(rows @ x) - labels)
        data_part = np.asarray(rows.T @ residual).ravel() / count
        return data_part + (w.sum() / count) * _regularizer_grad(model, x)
    targets = shard.targets if idx is None else shard.targets[idx]
    per_sample = np.asarray(rows) * (x[None, :] - targets)
    return (w[:, None] * per_sample).sum(axis=0) / count


def loss(model: LossModel, shard: WorkerShard, x: np.ndarray) -> float:
    _check_dim(shard, x)
    if model.is_logistic:
        z = np.asarray(shard.features @ x).ravel()
        data_term = np.logaddexp(0.0, z) - shard.labels * z
        return float(np.mean(data_term)) + _regularizer(model, x)
    diff = x[None, :] - shard.targets
    return float(np.mean(0.5 * np.sum(np.asarray(shard.features) * diff * diff, axis=1)))


def grad_sample(model: LossModel, sample: WorkerShard, x: np.ndarray) -> np.ndarray:
    """Gradient of one sample; ``sample`` is a one-row shard (see ``WorkerShard.sample``)."""
    _check_dim(sample, x)
    if sample.m != 1:
        raise ValueError("grad_sample expects a single-sample shard")
    return _weighted_grad(model, sample, x)


def full_grad(model: LossModel, shard: WorkerShard, x: np.ndarray) -> np.ndarray:
    _check_dim(shard, x)
    return _weighted_grad(model, shard, x)


def sample_smoothness(model: LossModel, shard: WorkerShard) -> np.ndarray:
    if model.is_logistic:
        feats = shard.features
        if sparse.issparse(feats):
            norms_sq = np.asarray(feats.multiply(feats).sum(axis=1)).ravel()
        else:
            norms_sq = np.sum(np.asarray(feats) ** 2, axis=1)
        return norms_sq / 4.0 + 2.0 * model.lam
    return np.max(np.asarray(shard.features), axis=1)


def smoothness_table(model: LossModel, shards: Sequence[WorkerShard]) -> SmoothnessTable:
    if not model.is_logistic:
        raise ValueError("smoothness_table supports logistic models; use quadratic_constants for the quadratic fixture")
    per_sample = [sample_smoothness(model, s) for s in shards]
    means = np.array([ls.mean() for ls in per_sample])
    return SmoothnessTable(per_sample=per_sample, per_worker_mean=means, global_L=float(means.max()))


def importance_probabilities(per_sample: np.ndarray) -> np.ndarray:
    return per_sample / per_sample.sum()


def draw_indices(estimator: DeltaEstimator, m: int, rng: np.random.Generator, probs: Optional[np.ndarray] = None) -> np.ndarray:
    """Inverse-CDF draws; both schemes consume exactly ``batch_size`` uniforms."""
    u = rng.random(estimator.batch_size)
    if estimator.scheme == "uniform":
        idx = np.floor(u * m).astype(np.int64)
    else:
        idx = np.searchsorted(np.cumsum(probs), u, side="right")
    return np.minimum(idx, m - 1)


def delta_hat(
    estimator: DeltaEstimator,
    model: LossModel,
    shard: WorkerShard,
    x: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    per_sample_L: Optional[np.ndarray] = None,
) -> np.ndarray:
    _check_dim(shard, x)
    _check_dim(shard, y)
    idx, weights = draw_batch(estimator, model, shard, rng, per_sample_L)
    return _weighted_grad(model, shard, x, idx, weights) - _weighted_grad(model, shard, y, idx, weights)


def draw_batch(
    estimator: DeltaEstimator,
    model: LossModel,
    shard: WorkerShard,
    rng: np.random.Generator,
    per_sample_L: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if estimator.scheme == "uniform":
        return draw_indices(estimator, shard.m, rng), None
    if per_sample_L is None:
        per_sample_L = sample_smoothness(model, shard)
    idx = draw_indices(estimator, shard.m, rng, importance_probabilities(per_sample_L))
    return idx, per_sample_L.mean() / per_sample_L[idx]


def minibatch_grad(
    model: LossModel,
    shard: WorkerShard,
    x: np.ndarray,
    idx: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    _check_dim(shard, x)
    return _weighted_grad(model, shard, x, idx, weights)


def hessian_variance_bound(table: SmoothnessTable, scheme: str) -> float:
    """Upper bound on the local Hessian-variance constant for each sampling scheme."""
    if scheme == "uniform":
        return float(np.sqrt(np.mean([np.mean(ls**2) for ls in table.per_sample])))
    return float(np.sqrt(np.mean(table.per_worker_mean**2)))


def distinct_shards(shards: Sequence[WorkerShard]) -> List[Tuple[WorkerShard, int]]:
    groups: Dict[Tuple[int, int], List] = {}
    for s in shards:
        key = (id(s.features), id(s.labels))
        if key in groups:
            groups[key][1] += 1
        else:
            groups[key] = [s, 1]
    return [(s, count) for s, count in groups.values()]


def objective(model: LossModel, shards: Sequence[WorkerShard], x: np.ndarray) -> float:
    """``f(x) = 1/G * sum_i f_i(x)``; shards sharing storage are evaluated once."""
    total = sum(count * loss(model, s, x) for s, count in distinct_shards(shards))
    return total / len(shards)


def objective_grad(model: LossModel, shards: Sequence[WorkerShard], x: np.ndarray) -> np.ndarray:
    total = sum(count * full_grad(model, s, x) for s, count in distinct_shards(shards))
    return total / len(shards)


def quadratic_constants(shards: Sequence[WorkerShard], scheme: str = "uniform") -> QuadraticConstants:
    """Exact constants of the diagonal quadratic fixture over the given good shards."""
    worker_h = np.array([np.asarray(s.features).mean(axis=0) for s in shards])
    worker_hc = np.array([(np.asarray(s.features) * s.targets).mean(axis=0) for s in shards])
    h_bar = worker_h.mean(axis=0)
    x_star = worker_hc.mean(axis=0) / h_bar

    L_pm_sq = float(np.max(np.mean((worker_h - h_bar) ** 2, axis=0)))
    per_coord = []
    for s, hi in zip(shards, worker_h):
        h = np.asarray(s.features)
        if scheme == "uniform":
            per_coord.append(np.mean((h - hi) ** 2, axis=0))
        else:
            Lj = np.max(h, axis=1)
            second = np.mean((Lj.mean() / Lj)[:, None] * h**2, axis=0)
            per_coord.append(second - hi**2)
    calL_sq = float(np.max(np.mean(per_coord, axis=0)))

    model = LossModel(kind="quadratic")
    return QuadraticConstants(
        L=float(h_bar.max()),
        L_pm=float(np.sqrt(L_pm_sq)),
        calL_pm=float(np.sqrt(max(calL_sq, 0.0))),
        mu=float(h_bar.min()),
        x_star=x_star,
        f_star=objective(model, shards, x_star),
    )
