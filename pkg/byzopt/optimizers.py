"""Training loops: the variance-reduced compressed method and its baselines.

Every round follows the same pattern: good workers build their messages from
their own random streams, Byzantine workers forge theirs (omniscient attacks see
the good messages first), and the server aggregates the list in worker-id order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .aggregation import Aggregator, mean, pairwise_variance
from .attacks import Attack, AttackContext, byz_message, sparsify_to_budget
from .compression import Compressor, compress, decompress, omega
from .models import DivergenceError, RoundRecord, WorkerPool, WorkerShard
from .problems import (
    DeltaEstimator,
    LossModel,
    delta_hat,
    draw_batch,
    full_grad,
    minibatch_grad,
    objective,
    objective_grad,
    sample_smoothness,
)
from .streams import SERVER, RngStreams

logger = logging.getLogger(__name__)

ALGORITHMS = ("marina", "sgd", "csgd", "br_sgdm", "byrd_svrg")

RngFor = Callable[[str, int], np.random.Generator]


@dataclass
class Simulation:
    model: LossModel
    pool: WorkerPool
    estimator: DeltaEstimator
    aggregator: Aggregator
    compressor: Compressor
    attack: Attack
    streams: RngStreams
    enforce_sparsity: bool = True
    per_sample_L: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.estimator.scheme == "importance" and not self.per_sample_L:
            self.per_sample_L = {s.worker_id: sample_smoothness(self.model, s) for s in self.workers}

    @property
    def workers(self) -> List[WorkerShard]:
        return list(self.pool.good) + list(self.pool.byzantine)

    @property
    def mean_shard_size(self) -> float:
        return float(np.mean([s.m for s in self.pool.good]))

    def live(self, role: str, worker_id: int) -> np.random.Generator:
        return self.streams.worker(role, worker_id)

    def default_p(self) -> float:
        return min(self.estimator.batch_size / self.mean_shard_size, 1.0 / (1.0 + omega(self.compressor)))


@dataclass
class MarinaState:
    x: np.ndarray
    g: np.ndarray
    gamma: float
    p: float
    b: int
    k: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0 < self.p <= 1:
            raise ValueError("p must lie in (0, 1]")
        if self.b < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class BaselineState:
    x: np.ndarray
    gamma: float
    k: int = 0
    beta: float = 0.9
    epoch_len: int = 1
    momentum: Optional[List[np.ndarray]] = None
    anchors: Optional[List[Tuple[np.ndarray, np.ndarray]]] = None


@dataclass
class RoundStats:
    bits: float
    oracle: float
    full_sync: bool
    msg_var: float
    aggregate: np.ndarray


@dataclass
class Trajectory:
    records: List[RoundRecord]
    x: np.ndarray
    g: Optional[np.ndarray] = None
    algorithm: str = "marina"
    diverged_at: Optional[int] = None


def _check_finite(x: np.ndarray, k: int) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(k, "non-finite iterate")


def _forge(
    sim: Simulation,
    good_msgs: List[np.ndarray],
    k: int,
    honest: Callable[[WorkerShard], np.ndarray],
    sparse_base: Optional[np.ndarray] = None,
) -> List[np.ndarray]:
    """Byzantine messages in worker-id order.

    ``sparse_base`` marks a compressed round: omniscient payloads relative to it are
    cut to the compressor's budget when sparsity is enforced.
    """
    if not sim.pool.byzantine:
        return []
    ctx = AttackContext(good_messages=good_msgs, n=sim.pool.n, byz_count=sim.pool.byz_count, round=k)
    if sim.attack.omniscient:
        v = byz_message(sim.attack, ctx)
        if sparse_base is not None and sim.enforce_sparsity and sim.compressor.kind == "rand_k":
            idx, vals = sparsify_to_budget(v - sparse_base, sim.compressor.k)
            v = sparse_base.copy()
            v[idx] += vals
        return [v] * sim.pool.byz_count
    return [byz_message(sim.attack, ctx, lambda s=s: honest(s)) for s in sim.pool.byzantine]


def _aggregate(sim: Simulation, good_msgs, byz_msgs, rng_for: RngFor) -> np.ndarray:
    return sim.aggregator.aggregate(list(good_msgs) + list(byz_msgs), rng_for("bucket", SERVER))


def init_g0(sim: Simulation, x0: np.ndarray, rng_for: Optional[RngFor] = None) -> Tuple[np.ndarray, float]:
    """Robust aggregate of full local gradients at ``x0``; returns ``(g0, pairwise variance)``."""
    rng_for = rng_for or sim.live
    good_msgs = [full_grad(sim.model, s, x0) for s in sim.pool.good]
    byz_msgs = _forge(sim, good_msgs, 0, lambda s: full_grad(sim.model, s, x0))
    return _aggregate(sim, good_msgs, byz_msgs, rng_for), pairwise_variance(good_msgs)


def _marina_message(sim: Simulation, shard: WorkerShard, x_old, x_new, g, full_sync: bool, rng_for: RngFor):
    if full_sync:
        return full_grad(sim.model, shard, x_new), sim.compressor.dense_bits, shard.m
    wid = shard.worker_id
    delta = delta_hat(
        sim.estimator, sim.model, shard, x_new, x_old, rng_for("sample", wid), sim.per_sample_L.get(wid)
    )
    msg = compress(sim.compressor, delta, rng_for("compress", wid))
    return g + decompress(msg), msg.bit_cost, 2 * sim.estimator.batch_size


def _marina_step(state: MarinaState, sim: Simulation, rng_for: RngFor):
    full_sync = bool(rng_for("coin", SERVER).random() < state.p)
    x_new = state.x - state.gamma * state.g
    _check_finite(x_new, state.k + 1)

    good = [_marina_message(sim, s, state.x, x_new, state.g, full_sync, rng_for) for s in sim.pool.good]
    good_msgs = [msg for msg, _, _ in good]
    byz_msgs = _forge(
        sim,
        good_msgs,
        state.k,
        lambda s: _marina_message(sim, s, state.x, x_new, state.g, full_sync, rng_for)[0],
        sparse_base=None if full_sync else state.g,
    )
    g_new = _aggregate(sim, good_msgs, byz_msgs, rng_for)
    stats = RoundStats(
        bits=float(np.mean([bits for _, bits, _ in good])),
        oracle=float(np.mean([calls for _, _, calls in good])),
        full_sync=full_sync,
        msg_var=pairwise_variance(good_msgs),
        aggregate=g_new,
    )
    return x_new, g_new, good_msgs, stats


def marina_round(state: MarinaState, sim: Simulation) -> Tuple[MarinaState, RoundStats]:
    x_new, g_new, _, stats = _marina_step(state, sim, sim.live)
    _check_finite(g_new, state.k + 1)
    return replace(state, x=x_new, g=g_new, k=state.k + 1), stats


def replay_round(state: MarinaState, sim: Simulation, replays: int) -> Dict[str, float]:
    """Monte Carlo replays of one round from a frozen ``(x^k, g^k)``.

    Replays draw from dedicated streams and leave the live ones untouched. Returns
    the mean and standard error of the good-message pairwise variance and of the
    distortion ``||g^{k+1} - grad f(x^{k+1})||^2``.
    """
    good = sim.pool.good
    x_new = state.x - state.gamma * state.g
    grad_new = objective_grad(sim.model, good, x_new)
    grad_old = objective_grad(sim.model, good, state.x)
    variances = np.empty(replays)
    distortions = np.empty(replays)
    for r in range(replays):

        def rng_for(role, wid, r=r):
            return sim.streams.replay(role, wid, state.k, r)

        _, g_new, _, stats = _marina_step(state, sim, rng_for)
        variances[r] = stats.msg_var
        distortions[r] = float(np.sum((g_new - grad_new) ** 2))

    def se(values):
        return float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0

    return {
        "var_mean": float(variances.mean()),
        "var_se": se(variances),
        "dist_mean": float(distortions.mean()),
        "dist_se": se(distortions),
        "dx_sq": float(np.sum((x_new - state.x) ** 2)),
        "grad_sq": float(np.sum(grad_old**2)),
        "gdist_sq": float(np.sum((state.g - grad_old) ** 2)),
    }


def _stochastic_grad(sim: Simulation, shard: WorkerShard, x: np.ndarray, rng: np.random.Generator):
    """Mini-batch gradient; a batch at least as large as the shard uses every sample."""
    b = sim.estimator.batch_size
    if b >= shard.m:
        return full_grad(sim.model, shard, x), shard.m
    idx, weights = draw_batch(sim.estimator, sim.model, shard, rng, sim.per_sample_L.get(shard.worker_id))
    return minibatch_grad(sim.model, shard, x, idx, weights), b


def _finish_baseline(state: BaselineState, sim: Simulation, good, byz_msgs, full_sync=False, **changes):
    good_msgs = [msg for msg, _, _ in good]
    agg = _aggregate(sim, good_msgs, byz_msgs, sim.live)
    x_new = state.x - state.gamma * agg
    _check_finite(x_new, state.k + 1)
    stats = RoundStats(
        bits=float(np.mean([bits for _, bits, _ in good])),
        oracle=float(np.mean([calls for _, _, calls in good])),
        full_sync=full_sync,
        msg_var=pairwise_variance(good_msgs),
        aggregate=agg,
    )
    return replace(state, x=x_new, k=state.k + 1, **changes), stats


def sgd_round(state: BaselineState, sim: Simulation, compressed: bool = False) -> Tuple[BaselineState, RoundStats]:
    def message(shard: WorkerShard):
        wid = shard.worker_id
        grad, calls = _stochastic_grad(sim, shard, state.x, sim.live("sample", wid))
        if not compressed:
            return grad, sim.compressor.dense_bits, calls
        msg = compress(sim.compressor, grad, sim.live("compress", wid))
        return decompress(msg), msg.bit_cost, calls

    good = [message(s) for s in sim.pool.good]
    byz_msgs = _forge(
        sim,
        [msg for msg, _, _ in good],
        state.k,
        lambda s: message(s)[0],
        sparse_base=np.zeros_like(state.x) if compressed else None,
    )
    return _finish_baseline(state, sim, good, byz_msgs)


def csgd_round(state: BaselineState, sim: Simulation) -> Tuple[BaselineState, RoundStats]:
    return sgd_round(state, sim, compressed=True)


def br_sgdm_round(state: BaselineState, sim: Simulation) -> Tuple[BaselineState, RoundStats]:
    if not 0 <= state.beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    beta = state.beta
    momentum = list(state.momentum) if state.momentum is not None else [np.zeros_like(state.x)] * sim.pool.n
    calls_by_worker = {}

    def update(shard: WorkerShard) -> np.ndarray:
        wid = shard.worker_id
        grad, calls = _stochastic_grad(sim, shard, state.x, sim.live("sample", wid))
        calls_by_worker[wid] = calls
        momentum[wid] = beta * momentum[wid] + (1.0 - beta) * grad
        return momentum[wid]

    good = [(update(s), sim.compressor.dense_bits, calls_by_worker[s.worker_id]) for s in sim.pool.good]
    byz_msgs = _forge(sim, [msg for msg, _, _ in good], state.k, update)
    return _finish_baseline(state, sim, good, byz_msgs, momentum=momentum)


def byrd_svrg_round(state: BaselineState, sim: Simulation) -> Tuple[BaselineState, RoundStats]:
    refresh = state.k % state.epoch_len == 0
    anchors = list(state.anchors) if state.anchors is not None else [None] * sim.pool.n

    def message(shard: WorkerShard):
        wid = shard.worker_id
        if refresh or anchors[wid] is None:
            grad = full_grad(sim.model, shard, state.x)
            anchors[wid] = (state.x.copy(), grad)
            return grad, sim.compressor.dense_bits, shard.m
        x_anchor, grad_anchor = anchors[wid]
        idx, weights = draw_batch(
            sim.estimator, sim.model, shard, sim.live("sample", wid), sim.per_sample_L.get(wid)
        )
        correction = minibatch_grad(sim.model, shard, state.x, idx, weights) - minibatch_grad(
            sim.model, shard, x_anchor, idx, weights
        )
        return correction + grad_anchor, sim.compressor.dense_bits, 2 * sim.estimator.batch_size

    good = [message(s) for s in sim.pool.good]
    byz_msgs = _forge(sim, [msg for msg, _, _ in good], state.k, lambda s: message(s)[0])
    return _finish_baseline(state, sim, good, byz_msgs, full_sync=refresh, anchors=anchors)


def gradient_descent(
    model: LossModel,
    shards: Sequence[WorkerShard],
    x0: np.ndarray,
    gamma: float,
    rounds: int,
    tol: float = 0.0,
    grad_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Tuple[np.ndarray, int]:
    """Reference full-gradient loop; stops early once ``||grad|| < tol``.

    The default gradient is the plain mean of the per-worker full gradients.
    """
    if grad_fn is None:

        def grad_fn(x):
            return mean([full_grad(model, s, x) for s in shards])

    x = np.array(x0, dtype=float)
    for k in range(rounds):
        grad = grad_fn(x)
        if tol > 0 and math.sqrt(float(grad @ grad)) < tol:
            return x, k
        x = x - gamma * grad
        _check_finite(x, k + 1)
    return x, rounds


def run_rounds(
    sim: Simulation,
    algorithm: str,
    x0: np.ndarray,
    gamma: float,
    rounds: int,
    p: Optional[float] = None,
    beta: float = 0.9,
    epoch_len: Optional[int] = None,
    diag_replays: int = 0,
    keep_partial: bool = False,
) -> Trajectory:
    """Drive ``algorithm`` for ``rounds`` rounds and record one row per iterate.

    A divergence raises ``DivergenceError`` unless ``keep_partial`` is set, in which
    case the rows recorded so far are returned with ``diverged_at`` filled in.

    Row ``k`` describes ``x^k``: its loss and squared gradient norm, the cumulative
    per-worker bits and oracle calls spent to reach it, the pairwise variance of the
    good messages that produced the current aggregate and ``||g^k - grad f(x^k)||^2``
    (for baselines, the aggregate of the round that produced ``x^k`` against the
    gradient at the previous iterate).
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm: {algorithm}")
    model, good = sim.model, sim.pool.good
    x0 = np.array(x0, dtype=float)
    grad = objective_grad(model, good, x0)
    if algorithm == "marina":
        g0, var0 = init_g0(sim, x0)
        state = MarinaState(
            x=x0, g=g0, gamma=gamma, p=sim.default_p() if p is None else p, b=sim.estimator.batch_size
        )
        gdist0 = float(np.sum((g0 - grad) ** 2))
    else:
        if epoch_len is None:
            epoch_len = math.ceil(sim.mean_shard_size / sim.estimator.batch_size)
        state = BaselineState(x=x0, gamma=gamma, beta=beta, epoch_len=epoch_len)
        var0 = gdist0 = math.nan

    step = {
        "marina": marina_round,
        "sgd": sgd_round,
        "csgd": csgd_round,
        "br_sgdm": br_sgdm_round,
        "byrd_svrg": byrd_svrg_round,
    }[algorithm]

    records = [RoundRecord(0, objective(model, good, x0), float(grad @ grad), 0, 0, var0, gdist0)]
    cum_bits = cum_oracle = 0.0
    diverged_at = None
    logger.debug("starting %s for %d rounds, gamma=%g", algorithm, rounds, gamma)
    try:
        for k in range(rounds):
            replay = None
            if diag_replays and algorithm == "marina":
                replay = replay_round(state, sim, diag_replays)
            x_old = state.x
            state, stats = step(state, sim)
            loss = objective(model, good, state.x)
            if not math.isfinite(loss):
                raise DivergenceError(k + 1, "non-finite loss")
            new_grad = objective_grad(model, good, state.x)
            if algorithm == "marina":
                gdist = float(np.sum((state.g - new_grad) ** 2))
            else:
                gdist = float(np.sum((stats.aggregate - grad) ** 2))
            grad = new_grad
            cum_bits += stats.bits
            cum_oracle += stats.oracle
            records.append(
                RoundRecord(
                    k=k + 1,
                    loss=loss,
                    grad_norm_sq=float(grad @ grad),
                    cum_bits=cum_bits,
                    cum_oracle=cum_oracle,
                    diag_msg_var=stats.msg_var,
                    diag_gdist=gdist,
                    full_sync=stats.full_sync,
                    step_sq=float(np.sum((state.x - x_old) ** 2)),
                    replay=replay,
                )
            )
    except DivergenceError as exc:
        if not keep_partial:
            raise
        logger.warning("%s with gamma=%g diverged at round %d: %s", algorithm, gamma, exc.round_index, exc.reason)
        diverged_at = exc.round_index
    return Trajectory(
        records=records,
        x=state.x,
        g=getattr(state, "g", None),
        algorithm=algorithm,
        diverged_at=diverged_at,
    )
