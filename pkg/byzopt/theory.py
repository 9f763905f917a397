"""Closed-form step-size ceilings, convergence bounds and assumption diagnostics.

Infeasible configurations follow the numeric helpers' convention: the ceiling is
``math.nan`` and the ``feasible_*`` flag is False. Bound evaluations at a step
size above the ceiling still return a value, flagged ``admissible=False``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, List, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from .models import ConfigError, InfeasibleBoundError, RoundRecord, WorkerShard
from .problems import LossModel, full_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TheoryInputs:
    L: float
    L_pm: float = 0.0
    calL_pm: float = 0.0
    mu: float = 0.0
    p: float = 1.0
    b: int = 1
    omega: float = 0.0
    G: int = 1
    c: float = 0.0
    delta: float = 0.0
    B: float = 0.0
    zeta2: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.p <= 0:
            raise ValueError("p must be positive")
        if self.p > 1:
            raise ValueError("p must not exceed 1")
        if self.delta >= 0.5:
            raise ValueError("delta must be below 1/2")
        if self.b < 1 or self.G < 1:
            raise ValueError("b and G must be at least 1")

    @property
    def c_delta(self) -> float:
        return self.c * self.delta

    @classmethod
    def from_mapping(cls, data: Mapping) -> "TheoryInputs":
        known = {f.name for f in fields(cls)}
        problems = [f"unknown key: {key}" for key in data if key not in known]
        if "L" not in data:
            problems.append("missing key: L")
        if problems:
            raise ConfigError(problems)
        try:
            return cls(**dict(data))
        except (TypeError, ValueError) as exc:
            raise ConfigError([str(exc)]) from exc


@dataclass
class TheoryOutputs:
    A: float
    gamma_max_nc: float
    gamma_max_pl: float
    neighborhood_nc: float
    neighborhood_pl: float
    feasible_nc: bool = True
    feasible_pl: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Bound:
    value: float
    admissible: bool = True


def compute_A(inp: TheoryInputs) -> float:
    p, cd, w = inp.p, inp.c_delta, inp.omega
    L2 = inp.L**2
    A = 0.0
    if inp.B > 0:
        A += 48.0 * inp.B * L2 * cd / p
    A += 6.0 * (1 - p) / p * (4 * cd / p + 1 / (2 * inp.G)) * (w * L2 + (1 + w) * inp.calL_pm**2 / inp.b)
    A += 6.0 * (1 - p) / p * (4 * cd * (1 + w) / p + w / (2 * inp.G)) * inp.L_pm**2
    return A


def compute_A_prime(inp: TheoryInputs) -> float:
    """Coefficient of ``||x^{k+1} - x^k||^2`` in the good-message variance bound."""
    p, w = inp.p, inp.omega
    hetero = w * inp.L**2 + (1 + w) * inp.L_pm**2 + (1 + w) * inp.calL_pm**2 / inp.b
    return 8.0 * inp.B * p * inp.L**2 + 4.0 * (1 - p) * hetero


def _nc_factor(inp: TheoryInputs) -> float:
    return 1.0 - 48.0 * inp.B * inp.c_delta / inp.p


def _pl_factor(inp: TheoryInputs) -> float:
    return 1.0 - 96.0 * inp.B * inp.c_delta / inp.p


def gamma_bounds(inp: TheoryInputs, A: Optional[float] = None):
    """``(gamma_max_nc, gamma_max_pl, feasible_nc, feasible_pl)``."""
    A = compute_A(inp) if A is None else A
    feasible_nc = _nc_factor(inp) > 0
    feasible_pl = _pl_factor(inp) > 0
    gamma_nc = 1.0 / (inp.L + math.sqrt(A)) if feasible_nc else math.nan
    gamma_pl = math.nan
    if feasible_pl:
        gamma_pl = 1.0 / (inp.L + math.sqrt(2.0 * A))
        if inp.mu > 0:
            gamma_pl = min(gamma_pl, inp.p / (4.0 * inp.mu * _pl_factor(inp)))
    return gamma_nc, gamma_pl, feasible_nc, feasible_pl


def neighborhoods(inp: TheoryInputs):
    nc = pl = math.nan
    if _nc_factor(inp) > 0:
        nc = 24.0 * inp.c_delta * inp.zeta2 / (inp.p - 48.0 * inp.B * inp.c_delta)
    if _pl_factor(inp) > 0 and inp.mu > 0:
        pl = 24.0 * inp.c_delta * inp.zeta2 / (inp.mu * (inp.p - 96.0 * inp.B * inp.c_delta))
    return nc, pl


def evaluate(inp: TheoryInputs) -> TheoryOutputs:
    A = compute_A(inp)
    gamma_nc, gamma_pl, feasible_nc, feasible_pl = gamma_bounds(inp, A)
    nb_nc, nb_pl = neighborhoods(inp)
    if not feasible_nc:
        logger.warning("delta=%g is too large for the non-convex bound with B=%g, c=%g", inp.delta, inp.B, inp.c)
    return TheoryOutputs(
        A=A,
        gamma_max_nc=gamma_nc,
        gamma_max_pl=gamma_pl,
        neighborhood_nc=nb_nc,
        neighborhood_pl=nb_pl,
        feasible_nc=feasible_nc,
        feasible_pl=feasible_pl,
    )


def phi0(f0: float, fstar: float, gdist0: float, gamma: float, p: float, pl: bool = False) -> float:
    weight = 2.0 if pl else 1.0
    return f0 - fstar + weight * gamma / p * gdist0


def nonconvex_bound(inp: TheoryInputs, phi0_value: float, K: int, gamma: float) -> Bound:
    """Bound on the expected squared gradient norm at a uniformly drawn iterate."""
    factor = _nc_factor(inp)
    if factor <= 0:
        raise InfeasibleBoundError(f"delta={inp.delta} violates delta < p / (48 c B)")
    gamma_max = gamma_bounds(inp)[0]
    admissible = 0 < gamma <= gamma_max * (1 + 1e-12)
    if not admissible:
        logger.warning("gamma=%g exceeds the non-convex ceiling %g", gamma, gamma_max)
    value = 2.0 * phi0_value / (gamma * factor * (K + 1))
    value += 24.0 * inp.c_delta * inp.zeta2 / (inp.p - 48.0 * inp.B * inp.c_delta)
    return Bound(value=value, admissible=admissible)


def pl_bound(inp: TheoryInputs, phi0_value: float, K: int, gamma: float) -> Bound:
    """Bound on the expected optimality gap after ``K`` rounds under the PL condition."""
    factor = _pl_factor(inp)
    if factor <= 0:
        raise InfeasibleBoundError(f"delta={inp.delta} violates delta < p / (96 c B)")
    if inp.mu <= 0:
        raise InfeasibleBoundError("the PL bound needs mu > 0")
    gamma_max = gamma_bounds(inp)[1]
    admissible = 0 < gamma <= gamma_max * (1 + 1e-12)
    if not admissible:
        logger.warning("gamma=%g exceeds the PL ceiling %g", gamma, gamma_max)
    rate = 1.0 - gamma * inp.mu * factor
    value = rate**K * phi0_value
    value += 24.0 * inp.c_delta * inp.zeta2 / (inp.mu * (inp.p - 96.0 * inp.B * inp.c_delta))
    return Bound(value=value, admissible=admissible)


def predict_rounds(
    inp: TheoryInputs,
    epsilon: float,
    phi0_value: float,
    gamma: Optional[float] = None,
    pl: bool = False,
) -> float:
    """Smallest ``K`` for which the relevant bound drops below ``epsilon``.

    Returns ``math.inf`` when ``epsilon`` does not exceed the neighbourhood term and
    ``math.nan`` when the configuration is infeasible or the PL step gives no contraction.
    """
    gamma_nc, gamma_pl, feasible_nc, feasible_pl = gamma_bounds(inp)
    nb_nc, nb_pl = neighborhoods(inp)
    if pl:
        if not feasible_pl or inp.mu <= 0:
            return math.nan
        gamma = gamma_pl if gamma is None else gamma
        slack = epsilon - nb_pl
        if slack <= 0:
            return math.inf
        if phi0_value <= slack:
            return 0
        rate = 1.0 - gamma * inp.mu * _pl_factor(inp)
        if not 0 < rate < 1:
            logger.warning("gamma=%g gives no PL contraction", gamma)
            return math.nan
        return math.ceil(math.log(slack / phi0_value) / math.log(rate))
    if not feasible_nc:
        return math.nan
    gamma = gamma_nc if gamma is None else gamma
    slack = epsilon - nb_nc
    if slack <= 0:
        return math.inf
    return max(0, math.ceil(2.0 * phi0_value / (gamma * _nc_factor(inp) * slack)) - 1)


@dataclass
class Heterogeneity:
    zeta2: float
    B_fit: float
    zeta2_fit: float
    lhs: List[float]
    grad_sq: List[float]


def heterogeneity_at(model: LossModel, shards: Sequence[WorkerShard], x: np.ndarray):
    local = np.stack([full_grad(model, s, x) for s in shards])
    total = local.mean(axis=0)
    lhs = float(np.mean(np.sum((local - total) ** 2, axis=1)))
    return lhs, float(total @ total)


def fit_heterogeneity(lhs: Sequence[float], grad_sq: Sequence[float]):
    """Non-negative least-squares fit of ``lhs ~ B * grad_sq + zeta^2``; returns ``(B, zeta^2)``."""
    lhs = np.asarray(lhs, dtype=float)
    if lhs.size < 2:
        return 0.0, float(lhs.max())
    design = np.column_stack([np.asarray(grad_sq, dtype=float), np.ones(lhs.size)])
    coef, _ = nnls(design, lhs)
    return float(coef[0]), float(coef[1])


def measure_heterogeneity(model: LossModel, shards: Sequence[WorkerShard], points: Iterable[np.ndarray]) -> Heterogeneity:
    """Largest observed heterogeneity and a non-negative ``(B, zeta^2)`` fit."""
    lhs, gsq = [], []
    for x in points:
        value, norm_sq = heterogeneity_at(model, shards, x)
        lhs.append(value)
        gsq.append(norm_sq)
    if not lhs:
        raise ValueError("measure_heterogeneity needs at least one point")
    B_fit, zeta2_fit = fit_heterogeneity(lhs, gsq)
    return Heterogeneity(zeta2=max(lhs), B_fit=B_fit, zeta2_fit=zeta2_fit, lhs=lhs, grad_sq=gsq)


@dataclass
class RoundBoundCheck:
    k: int
    var_lhs: float
    var_se: float
    var_rhs: float
    dist_lhs: float
    dist_se: float
    dist_rhs: float

    @property
    def var_violated(self) -> bool:
        return self.var_lhs - 3.0 * self.var_se > self.var_rhs * (1 + 1e-12)

    @property
    def dist_violated(self) -> bool:
        return self.dist_lhs - 3.0 * self.dist_se > self.dist_rhs * (1 + 1e-12)


def measure_round_bounds(records: Sequence[RoundRecord], inp: TheoryInputs) -> List[RoundBoundCheck]:
    """Compare replayed one-round statistics with their theoretical upper bounds.

    Rows without replay data are skipped.
    """
    A = compute_A(inp)
    A_prime = compute_A_prime(inp)
    p, cd = inp.p, inp.c_delta
    checks = []
    for rec in records:
        r = rec.replay
        if not r:
            continue
        var_rhs = A_prime * r["dx_sq"] + 8.0 * inp.B * p * r["grad_sq"] + 4.0 * p * inp.zeta2
        dist_rhs = (
            (1.0 - p / 2.0) * r["gdist_sq"]
            + 24.0 * inp.B * cd * r["grad_sq"]
            + 12.0 * cd * inp.zeta2
            + p / 4.0 * A * r["dx_sq"]
        )
        check = RoundBoundCheck(
            k=rec.k,
            var_lhs=r["var_mean"],
            var_se=r["var_se"],
            var_rhs=var_rhs,
            dist_lhs=r["dist_mean"],
            dist_se=r["dist_se"],
            dist_rhs=dist_rhs,
        )
        if check.var_violated or check.dist_violated:
            logger.warning("round %d exceeds a one-round bound: %s", rec.k, check)
        checks.append(check)
    return checks
