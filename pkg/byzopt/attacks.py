"""Byzantine message strategies.

Attacks forge the messages the server aggregates. ``na``, ``bf`` and ``lf`` run the
worker's honest pipeline (``lf`` on a label-flipped shard built by
``data.build_pool``); ``alie`` and ``ipm`` are omniscient and read every good
message of the round. All Byzantine workers using ``alie``/``ipm`` send the same
vector.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import stats

from .models import AggregationError

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("na", "lf", "bf", "alie", "ipm")
OMNISCIENT = ("alie", "ipm")


@dataclass(frozen=True)
class Attack:
    kind: str = "na"
    ipm_epsilon: float = 0.1
    alie_z: Optional[float] = None
    alie_z_floor: float = 0.3

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack: {self.kind}")
        if self.kind == "ipm" and self.ipm_epsilon <= 0:
            raise ValueError("ipm_epsilon must be positive")

    @property
    def omniscient(self) -> bool:
        return self.kind in OMNISCIENT

    @property
    def flips_labels(self) -> bool:
        return self.kind == "lf"


@dataclass
class AttackContext:
    good_messages: List[np.ndarray]
    n: int
    byz_count: int
    round: int = 0


def alie_auto_z(n: int, byz: int, floor: float = 0.3) -> float:
    """``z`` from the number of workers the attacker needs on its side."""
    if byz >= n / 2:
        raise ValueError(f"alie needs byz < n/2, got byz={byz}, n={n}")
    s = math.floor(n / 2 + 1) - byz
    arg = (n - byz - s) / (n - byz)
    if arg <= 0.5:
        return floor
    return float(stats.norm.ppf(arg))


def byz_message(
    attack: Attack,
    ctx: AttackContext,
    honest_pipeline: Optional[Callable[[], np.ndarray]] = None,
) -> np.ndarray:
    if attack.kind in ("na", "lf"):
        return honest_pipeline()
    if attack.kind == "bf":
        return -honest_pipeline()

    if not ctx.good_messages:
        raise AggregationError(f"{attack.kind} needs at least one good message")
    stacked = np.stack(ctx.good_messages)
    mu = stacked.mean(axis=0)
    if attack.kind == "ipm":
        return -attack.ipm_epsilon * mu
    z = attack.alie_z if attack.alie_z is not None else alie_auto_z(ctx.n, ctx.byz_count, attack.alie_z_floor)
    sigma = stacked.std(axis=0)
    logger.debug("alie round %d: z=%.4f, mean sigma %.3g", ctx.round, z, float(sigma.mean()))
    return mu - z * sigma


def sparsify_to_budget(v: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Keep the ``k`` largest-magnitude coordinates; returns sorted ``(indices, values)``."""
    order = np.argsort(-np.abs(v), kind="stable")[:k]
    idx = np.sort(order)
    return idx, v[idx]
