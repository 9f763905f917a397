"""Experiment driver: run configs, f* reference, multi-seed cells and trace files."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .aggregation import BASE_RULES, Aggregator
from .attacks import ATTACK_KINDS, Attack
from .compression import COMPRESSOR_KINDS, Compressor, omega
from .data import SHARD_MODES, build_pool, contract_targets, load_libsvm, make_quadratic, make_synthetic_logistic
from .models import ConfigError, Dataset, FStar, WorkerPool, WorkerShard
from .optimizers import ALGORITHMS, Simulation, Trajectory, gradient_descent, run_rounds
from .problems import (
    MODEL_KINDS,
    SAMPLING_SCHEMES,
    DeltaEstimator,
    LossModel,
    distinct_shards,
    objective,
    objective_grad,
    quadratic_constants,
    smoothness_table,
)
from .streams import RngStreams
from .theory import TheoryInputs, measure_round_bounds

logger = logging.getLogger(__name__)

TRACE_COLUMNS = [
    "seed",
    "k",
    "gap",
    "grad_norm_sq",
    "cum_bits",
    "cum_oracle",
    "diag_msg_var",
    "diag_gdist",
    "epochs",
]
REPLAY_COLUMNS = ["diag_var_lhs", "diag_var_se", "diag_dist_lhs", "diag_dist_se"]
BOUND_COLUMNS = ["diag_var_rhs", "diag_dist_rhs"]

MANDATORY = ("model", "n_workers", "byz_count", "algorithm", "aggregator", "rounds")
SYNTHETIC_KINDS = ("logistic", "quadratic")
AUTO_KEYS = ("p", "epoch_len", "krum_byz", "alie_z")


def _ensure_pandas():
    try:
        import pandas as pd

        return pd
    except ImportError as exc:
        raise RuntimeError("pandas is required for trace frames") from exc


@dataclass
class RunConfig:
    model: Optional[str] = None
    n_workers: Optional[int] = None
    byz_count: Optional[int] = None
    algorithm: Optional[str] = None
    aggregator: Optional[str] = None
    rounds: Optional[int] = None
    dataset: Optional[str] = None
    synthetic: Optional[str] = None

    attack: str = "na"
    gammas: List[float] = field(default_factory=lambda: [0.5, 0.05, 0.005])
    seeds: List[int] = field(default_factory=lambda: [1, 2, 3])
    batch_size: int = 32
    sampling: str = "uniform"
    shard_mode: str = "full_copy"
    lam: float = 0.01
    p: Optional[float] = None
    beta: float = 0.9
    epoch_len: Optional[int] = None

    bucket_size: int = 2
    rfa_iters: int = 8
    rfa_smoothing: float = 1e-6
    krum_byz: Optional[int] = None

    ipm_epsilon: float = 0.1
    alie_z: Optional[float] = None
    alie_z_floor: float = 0.3

    compressor: str = "identity"
    k: Optional[int] = None
    k_fraction: Optional[float] = None
    value_bits: int = 64
    index_bits: Optional[int] = None
    enforce_sparsity: bool = True

    samples: int = 2000
    dim: int = 50
    data_seed: int = 0
    spread: float = 1.0
    target_contraction: Optional[float] = None
    densify: bool = False
    add_bias: bool = False

    diag_replays: int = 0
    theory: Optional[dict] = None
    threads: int = 1
    name: str = "run"
    out: Optional[str] = None

    @classmethod
    def from_mapping(cls, data: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        problems = [f"unknown key: {key}" for key in data if key not in known]
        values = {}
        for key, value in data.items():
            if key not in known:
                continue
            values[key] = None if key in AUTO_KEYS and value == "auto" else value
        cfg = cls(**values)
        problems.extend(cfg.validate())
        if problems:
            raise ConfigError(problems)
        return cfg

    def validate(self) -> List[str]:
        problems: List[str] = []

        def is_int(value):
            return isinstance(value, int) and not isinstance(value, bool)

        def is_num(value):
            return isinstance(value, (int, float)) and not isinstance(value, bool)

        for key in MANDATORY:
            if getattr(self, key) is None:
                problems.append(f"missing key: {key}")
        if (self.dataset is None) == (self.synthetic is None):
            problems.append("exactly one of dataset or synthetic must be given")

        for key, allowed in (
            ("model", MODEL_KINDS),
            ("algorithm", ALGORITHMS),
            ("aggregator", BASE_RULES),
            ("attack", ATTACK_KINDS),
            ("compressor", COMPRESSOR_KINDS),
            ("shard_mode", SHARD_MODES),
            ("sampling", SAMPLING_SCHEMES),
            ("synthetic", SYNTHETIC_KINDS),
        ):
            value = getattr(self, key)
            if value is not None and value not in allowed:
                problems.append(f"{key}: {value!r} is not one of {', '.join(allowed)}")

        int_minimums = {
            "n_workers": 1,
            "byz_count": 0,
            "rounds": 1,
            "batch_size": 1,
            "bucket_size": 1,
            "rfa_iters": 1,
            "value_bits": 1,
            "samples": 1,
            "dim": 1,
            "diag_replays": 0,
            "threads": 0,
            "epoch_len": 1,
            "krum_byz": 0,
            "k": 1,
            "index_bits": 1,
            "data_seed": 0,
        }
        for key, minimum in int_minimums.items():
            value = getattr(self, key)
            if value is None:
                continue
            if not is_int(value):
                problems.append(f"{key}: expected an integer, got {value!r}")
            elif value < minimum:
                problems.append(f"{key}: must be at least {minimum}, got {value}")

        for key in ("lam", "rfa_smoothing", "ipm_epsilon", "alie_z_floor", "beta", "spread"):
            if not is_num(getattr(self, key)):
                problems.append(f"{key}: expected a number, got {getattr(self, key)!r}")
        for key in ("p", "alie_z", "k_fraction", "target_contraction"):
            value = getattr(self, key)
            if value is not None and not is_num(value):
                problems.append(f"{key}: expected a number or auto, got {value!r}")
        for key in ("densify", "add_bias", "enforce_sparsity"):
            if not isinstance(getattr(self, key), bool):
                problems.append(f"{key}: expected true or false")
        if problems:
            return problems

        if not isinstance(self.gammas, list) or not self.gammas:
            problems.append("gammas: expected a non-empty list")
        elif not all(is_num(g) and g > 0 for g in self.gammas):
            problems.append("gammas: every step size must be a positive number")
        if not isinstance(self.seeds, list) or not self.seeds:
            problems.append("seeds: expected a non-empty list")
        elif not all(is_int(s) and s >= 0 for s in self.seeds):
            problems.append("seeds: every seed must be a non-negative integer")

        if self.lam < 0:
            problems.append("lam: must be non-negative")
        if self.rfa_smoothing <= 0:
            problems.append("rfa_smoothing: must be positive")
        if self.ipm_epsilon <= 0:
            problems.append("ipm_epsilon: must be positive")
        if not 0 <= self.beta < 1:
            problems.append("beta: must lie in [0, 1)")
        if self.p is not None and not 0 < self.p <= 1:
            problems.append("p: must lie in (0, 1]")
        if self.target_contraction is not None and not 0 <= self.target_contraction <= 1:
            problems.append("target_contraction: must lie in [0, 1]")

        if self.byz_count is not None and self.n_workers is not None:
            if self.byz_count >= self.n_workers / 2:
                problems.append(f"byz_count: {self.byz_count} Byzantine workers of {self.n_workers} is not below n/2")
            if self.aggregator == "krum":
                byz = self.byz_count if self.krum_byz is None else self.krum_byz
                buckets = math.ceil(self.n_workers / self.bucket_size)
                if buckets - byz - 2 < 1:
                    problems.append(f"krum: {buckets} buckets leave no neighbours with {byz} assumed Byzantine workers")

        if self.compressor == "rand_k":
            if (self.k is None) == (self.k_fraction is None):
                problems.append("rand_k: give exactly one of k or k_fraction")
            elif self.k_fraction is not None and not 0 < self.k_fraction <= 1:
                problems.append("k_fraction: must lie in (0, 1]")
            elif self.k is not None and self.synthetic is not None and self.k > self.dim:
                problems.append(f"k: {self.k} exceeds dim {self.dim}")

        if self.model == "quadratic" and self.synthetic != "quadratic":
            problems.append("model quadratic needs synthetic: quadratic")
        if self.synthetic == "quadratic" and self.model not in (None, "quadratic"):
            problems.append("synthetic quadratic needs model: quadratic")
        if self.target_contraction is not None and self.synthetic != "quadratic":
            problems.append("target_contraction applies to synthetic quadratic data only")
        if self.attack == "lf" and self.model == "quadratic":
            problems.append("attack lf needs a classification model")
        if self.diag_replays and self.algorithm != "marina":
            problems.append("diag_replays: replay diagnostics exist for algorithm marina only")
        if self.theory is not None:
            if not isinstance(self.theory, dict):
                problems.append("theory: expected a mapping of bound constants")
            else:
                if not self.diag_replays:
                    problems.append("theory: one-round bound columns need diag_replays > 0")
                try:
                    TheoryInputs.from_mapping(self.theory)
                except ConfigError as exc:
                    problems.extend(f"theory: {problem}" for problem in exc.problems)
        return problems

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError([f"override {text!r} is not of the form key=value"])
    import yaml

    return key.strip(), yaml.safe_load(raw)


def read_document(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open() as fh:
        if path.suffix.lower() in {".yaml", ".yml"}:
            try:
                import yaml
            except ImportError as exc:
                raise RuntimeError("PyYAML is required to read YAML configs") from exc
            data = yaml.safe_load(fh)
        else:
            data = json.load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: expected a mapping of keys to values"])
    return data


def load_config(path, overrides: Iterable[str] = ()) -> RunConfig:
    path = Path(path)
    data = read_document(path)
    for text in overrides:
        key, value = parse_override(text)
        data[key] = value
    dataset = data.get("dataset")
    if isinstance(dataset, str) and not Path(dataset).is_absolute():
        candidate = path.parent / dataset
        if candidate.exists():
            data["dataset"] = str(candidate)
    return RunConfig.from_mapping(data)


def build_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset is not None:
        return load_libsvm(cfg.dataset, densify=cfg.densify, add_bias=cfg.add_bias)
    if cfg.synthetic == "logistic":
        return make_synthetic_logistic(cfg.samples, cfg.dim, cfg.data_seed)
    dataset = make_quadratic(cfg.samples, cfg.dim, cfg.data_seed, spread=cfg.spread)
    if cfg.target_contraction is not None:
        dataset = contract_targets(dataset, cfg.target_contraction)
    return dataset


def build_worker_pool(cfg: RunConfig, dataset: Dataset) -> WorkerPool:
    return build_pool(
        dataset,
        cfg.n_workers,
        cfg.byz_count,
        cfg.shard_mode,
        seed=cfg.data_seed,
        flip_byzantine_labels=cfg.attack == "lf",
    )


def build_compressor(cfg: RunConfig, d: int) -> Compressor:
    if cfg.compressor == "identity":
        return Compressor.identity(d, cfg.value_bits)
    k = cfg.k if cfg.k is not None else max(1, int(round(cfg.k_fraction * d)))
    return Compressor.rand_k(d, min(k, d), cfg.value_bits, cfg.index_bits)


def build_simulation(cfg: RunConfig, pool: WorkerPool, seed: int) -> Simulation:
    d = pool.good[0].dim
    return Simulation(
        model=LossModel(cfg.model, cfg.lam),
        pool=pool,
        estimator=DeltaEstimator(cfg.sampling, cfg.batch_size),
        aggregator=Aggregator(
            base=cfg.aggregator,
            bucket_size=cfg.bucket_size,
            rfa_iters=cfg.rfa_iters,
            rfa_smoothing=cfg.rfa_smoothing,
            krum_byz=cfg.byz_count if cfg.krum_byz is None else cfg.krum_byz,
        ),
        compressor=build_compressor(cfg, d),
        attack=Attack(cfg.attack, cfg.ipm_epsilon, cfg.alie_z, cfg.alie_z_floor),
        streams=RngStreams(seed),
        enforce_sparsity=cfg.enforce_sparsity,
    )


def compute_fstar(model: LossModel, shards: Sequence[WorkerShard], epochs: int = 1000, tol: float = 1e-12) -> FStar:
    """Reference optimum of ``f`` over the good shards.

    The quadratic fixture has a closed form; logistic models run gradient descent
    with step ``1/L``. The non-convex model only yields the best value found.
    """
    if model.kind == "quadratic":
        consts = quadratic_constants(shards)
        return FStar(value=consts.f_star, x=consts.x_star)
    L = smoothness_table(model, [s for s, _ in distinct_shards(shards)]).global_L
    x0 = np.zeros(shards[0].dim)
    x, used = gradient_descent(
        model, shards, x0, 1.0 / L, epochs, tol=tol, grad_fn=lambda x: objective_grad(model, shards, x)
    )
    value = objective(model, shards, x)
    approximate = model.kind == "logistic_nonconvex"
    if approximate:
        logger.warning("f* for the non-convex model is the best value found after %d epochs: %.17g", used, value)
    else:
        logger.info("f* = %.17g after %d epochs", value, used)
    return FStar(value=value, x=x, approximate=approximate, epochs=used)


@dataclass
class CellResult:
    gamma: float
    seed: int
    trajectory: Trajectory
    frame: object
    path: Optional[Path] = None

    @property
    def diverged(self) -> bool:
        return self.trajectory.diverged_at is not None

    @property
    def final_gap(self) -> float:
        """Mean gap over the last quarter of the recorded rounds."""
        if self.diverged:
            return math.nan
        gaps = self.frame["gap"].to_numpy()
        tail = max(1, len(gaps) // 4)
        return float(np.mean(gaps[-tail:]))


def theory_inputs_for(cfg: RunConfig, sim: Simulation) -> Optional[TheoryInputs]:
    """Bound constants from ``cfg.theory``; ``p``, ``b``, ``G`` and ``omega`` default to the run's own."""
    if cfg.theory is None:
        return None
    data = {
        "p": sim.default_p() if cfg.p is None else cfg.p,
        "b": sim.estimator.batch_size,
        "G": len(sim.pool.good),
        "omega": omega(sim.compressor),
    }
    data.update(cfg.theory)
    return TheoryInputs.from_mapping(data)


def trace_frame(trajectory: Trajectory, seed: int, fstar: float, m: float, inputs: Optional[TheoryInputs] = None):
    """One row per iterate; replayed rounds add ``diag_*`` statistics and, given ``inputs``, their bounds."""
    pd = _ensure_pandas()
    records = trajectory.records
    columns = list(TRACE_COLUMNS)
    rows = [
        {
            "seed": seed,
            "k": rec.k,
            "gap": rec.loss - fstar,
            "grad_norm_sq": rec.grad_norm_sq,
            "cum_bits": rec.cum_bits,
            "cum_oracle": rec.cum_oracle,
            "diag_msg_var": rec.diag_msg_var,
            "diag_gdist": rec.diag_gdist,
            "epochs": rec.cum_oracle / m,
        }
        for rec in records
    ]
    if any(rec.replay for rec in records):
        columns += REPLAY_COLUMNS
        for row, rec in zip(rows, records):
            r = rec.replay or {}
            row["diag_var_lhs"] = r.get("var_mean", math.nan)
            row["diag_var_se"] = r.get("var_se", math.nan)
            row["diag_dist_lhs"] = r.get("dist_mean", math.nan)
            row["diag_dist_se"] = r.get("dist_se", math.nan)
        if inputs is not None:
            columns += BOUND_COLUMNS
            checks = {check.k: check for check in measure_round_bounds(records, inputs)}
            for row in rows:
                check = checks.get(row["k"])
                row["diag_var_rhs"] = check.var_rhs if check else math.nan
                row["diag_dist_rhs"] = check.dist_rhs if check else math.nan
    return pd.DataFrame(rows, columns=columns)


def _atomic_write(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace(frame, path: Path) -> None:
    _atomic_write(path, lambda fh: frame.to_csv(fh, index=False, float_format="%.17g"))


def write_json(data: dict, path: Path) -> None:
    _atomic_write(path, lambda fh: fh.write(json.dumps(data, indent=2) + "\n"))


def trace_path(out_dir: Path, name: str, gamma: float, seed: int) -> Path:
    return out_dir / f"{name}_gamma{gamma:g}_seed{seed}.csv"


def run_cell(cfg: RunConfig, pool: WorkerPool, fstar: float, gamma: float, seed: int, out_dir: Optional[Path] = None) -> CellResult:
    sim = build_simulation(cfg, pool, seed)
    logger.info("cell %s gamma=%g seed=%d", cfg.name, gamma, seed)
    trajectory = run_rounds(
        sim,
        cfg.algorithm,
        np.zeros(pool.good[0].dim),
        gamma,
        cfg.rounds,
        p=cfg.p,
        beta=cfg.beta,
        epoch_len=cfg.epoch_len,
        diag_replays=cfg.diag_replays,
        keep_partial=True,
    )
    frame = trace_frame(trajectory, seed, fstar, sim.mean_shard_size, theory_inputs_for(cfg, sim))
    result = CellResult(gamma=gamma, seed=seed, trajectory=trajectory, frame=frame)
    if out_dir is not None:
        result.path = trace_path(out_dir, cfg.name, gamma, seed)
        write_trace(frame, result.path)
    return result


def _json_number(value: float):
    return None if value is None or not math.isfinite(value) else value


def summarize(cells: Sequence[CellResult], gammas: Sequence[float]) -> dict:
    """Per-step-size mean and standard error of the final gap, plus the best step size.

    Step sizes with diverged seeds rank after all fully convergent ones.
    """
    per_gamma = []
    for gamma in gammas:
        mine = [c for c in cells if c.gamma == gamma]
        finals = np.array([c.final_gap for c in mine if not c.diverged])
        diverged = sum(1 for c in mine if c.diverged)
        mean_gap = float(finals.mean()) if finals.size else math.nan
        stderr = float(finals.std(ddof=1) / math.sqrt(finals.size)) if finals.size > 1 else 0.0
        per_gamma.append({"gamma": gamma, "mean_final_gap": mean_gap, "stderr": stderr, "diverged_seeds": diverged})

    ranked = sorted(
        (entry for entry in per_gamma if not math.isnan(entry["mean_final_gap"])),
        key=lambda e: (e["diverged_seeds"] > 0, e["mean_final_gap"]),
    )
    best = ranked[0]["gamma"] if ranked else None
    return {
        "best_gamma": best,
        "per_gamma": [
            {**entry, "mean_final_gap": _json_number(entry["mean_final_gap"])} for entry in per_gamma
        ],
    }


def relative_compression(frame, value_bits: int, d: int, m: float):
    """Bits sent so far over the bits of one full-precision round, per dataset size."""
    return frame["cum_bits"] / (value_bits * d) / m


@dataclass
class RunOutput:
    summary: dict
    cells: List[CellResult]
    fstar: FStar
    summary_path: Optional[Path] = None


def run(cfg: RunConfig, out_dir=None, threads: Optional[int] = None) -> RunOutput:
    problems = cfg.validate()
    if problems:
        raise ConfigError(problems)
    out_dir = Path(out_dir or cfg.out) if (out_dir or cfg.out) else None
    threads = cfg.threads if threads is None else threads
    threads = threads or os.cpu_count() or 1

    dataset = build_dataset(cfg)
    pool = build_worker_pool(cfg, dataset)
    fstar = compute_fstar(LossModel(cfg.model, cfg.lam), pool.good)
    logger.info(
        "run %s: %s with %s on %d workers (%d Byzantine, %s), %d cells",
        cfg.name,
        cfg.algorithm,
        cfg.aggregator,
        cfg.n_workers,
        cfg.byz_count,
        cfg.attack,
        len(cfg.gammas) * len(cfg.seeds),
    )

    jobs = [(gamma, seed) for gamma in cfg.gammas for seed in cfg.seeds]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            futures = [pool_exec.submit(run_cell, cfg, pool, fstar.value, g, s, out_dir) for g, s in jobs]
            cells = [f.result() for f in futures]
    else:
        cells = [run_cell(cfg, pool, fstar.value, g, s, out_dir) for g, s in jobs]

    summary = summarize(cells, cfg.gammas)
    summary["fstar"] = fstar.value
    summary["fstar_approximate"] = fstar.approximate
    output = RunOutput(summary=summary, cells=cells, fstar=fstar)
    if out_dir is not None:
        output.summary_path = out_dir / f"{cfg.name}_summary.json"
        write_json(summary, output.summary_path)
    if summary["best_gamma"] is None:
        logger.warning("every step size diverged for %s", cfg.name)
    else:
        logger.info("best step size for %s: %g", cfg.name, summary["best_gamma"])
    return output
