from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


class ByzOptError(Exception):
    """Base class for every error raised by the package."""


class DataFormatError(ByzOptError, ValueError):
    pass


class DimensionMismatchError(ByzOptError, ValueError):
    pass


class AggregationError(ByzOptError, ValueError):
    pass


class InfeasibleBoundError(ByzOptError, ValueError):
    pass


class ConfigError(ByzOptError, ValueError):
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems) or "invalid configuration")


class DivergenceError(ByzOptError, RuntimeError):
    def __init__(self, round_index: int, reason: str):
        self.round_index = round_index
        self.reason = reason
        super().__init__(f"run diverged at round {round_index}: {reason}")


@dataclass
class Dataset:
    """Samples of one problem instance.

    ``features`` is a CSR matrix for LIBSVM data (or a dense array after ``densify``).
    For the quadratic fixture ``features`` holds the per-sample diagonal curvatures
    and ``targets`` the per-sample centers.
    """

    features: object
    labels: np.ndarray
    dim: int
    targets: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(self.features.shape[0])


@dataclass
class WorkerShard:
    worker_id: int
    features: object
    labels: np.ndarray
    targets: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def sample(self, j: int) -> "WorkerShard":
        targets = None if self.targets is None else self.targets[j : j + 1]
        return WorkerShard(
            worker_id=self.worker_id,
            features=self.features[j : j + 1],
            labels=self.labels[j : j + 1],
            targets=targets,
        )


@dataclass
class WorkerPool:
    """Good shards first, then Byzantine shards; worker ids follow that order."""

    good: List[WorkerShard]
    byzantine: List[WorkerShard] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.good) + len(self.byzantine)

    @property
    def G(self) -> int:
        return len(self.good)

    @property
    def byz_count(self) -> int:
        return len(self.byzantine)

    @property
    def delta(self) -> float:
        return self.byz_count / self.n


@dataclass
class RoundRecord:
    k: int
    loss: float
    grad_norm_sq: float
    cum_bits: float
    cum_oracle: float
    diag_msg_var: float
    diag_gdist: float
    full_sync: bool = True
    step_sq: float = 0.0
    replay: Optional[dict] = None


@dataclass
class FStar:
    value: float
    x: np.ndarray
    approximate: bool = False
    epochs: int = 0
