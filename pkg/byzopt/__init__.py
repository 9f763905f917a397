"""Simulator for Byzantine-robust, communication-compressed distributed optimization."""

from .models import (
    AggregationError,
    ByzOptError,
    ConfigError,
    Dataset,
    DataFormatError,
    DimensionMismatchError,
    DivergenceError,
    FStar,
    InfeasibleBoundError,
    RoundRecord,
    WorkerPool,
    WorkerShard,
)
from .streams import RngStreams, derive
from .data import (
    build_pool,
    contract_targets,
    dump_libsvm,
    flip_labels,
    load_libsvm,
    make_quadratic,
    make_synthetic_logistic,
    parse_libsvm,
    shard,
)
from .problems import (
    DeltaEstimator,
    LossModel,
    SmoothnessTable,
    delta_hat,
    full_grad,
    grad_sample,
    importance_probabilities,
    loss,
    objective,
    objective_grad,
    quadratic_constants,
    smoothness_table,
)
from .compression import CompressedMessage, Compressor, compress, decompress, expected_density, omega, sent_components
from .aggregation import (
    Aggregator,
    bucketing_aggregate,
    certify,
    coordinate_median,
    krum,
    mean,
    pairwise_variance,
    rfa,
)
from .attacks import Attack, AttackContext, alie_auto_z, byz_message, sparsify_to_budget
from .optimizers import (
    BaselineState,
    MarinaState,
    Simulation,
    br_sgdm_round,
    byrd_svrg_round,
    csgd_round,
    gradient_descent,
    init_g0,
    marina_round,
    replay_round,
    run_rounds,
    sgd_round,
)
from .theory import (
    TheoryInputs,
    TheoryOutputs,
    compute_A,
    evaluate,
    fit_heterogeneity,
    gamma_bounds,
    measure_heterogeneity,
    measure_round_bounds,
    nonconvex_bound,
    phi0,
    pl_bound,
    predict_rounds,
)
from .harness import RunConfig, compute_fstar, load_config, relative_compression, run, run_cell, summarize

__all__ = [
    "AggregationError",
    "ByzOptError",
    "ConfigError",
    "Dataset",
    "DataFormatError",
    "DimensionMismatchError",
    "DivergenceError",
    "FStar",
    "InfeasibleBoundError",
    "RoundRecord",
    "WorkerPool",
    "WorkerShard",
    "RngStreams",
    "derive",
    "build_pool",
    "contract_targets",
    "dump_libsvm",
    "flip_labels",
    "load_libsvm",
    "make_quadratic",
    "make_synthetic_logistic",
    "parse_libsvm",
    "shard",
    "DeltaEstimator",
    "LossModel",
    "SmoothnessTable",
    "delta_hat",
    "full_grad",
    "grad_sample",
    "importance_probabilities",
    "loss",
    "objective",
    "objective_grad",
    "quadratic_constants",
    "smoothness_table",
    "CompressedMessage",
    "Compressor",
    "compress",
    "decompress",
    "expected_density",
    "omega",
    "sent_components",
    "Aggregator",
    "bucketing_aggregate",
    "certify",
    "coordinate_median",
    "krum",
    "mean",
    "pairwise_variance",
    "rfa",
    "Attack",
    "AttackContext",
    "alie_auto_z",
    "byz_message",
    "sparsify_to_budget",
    "BaselineState",
    "MarinaState",
    "Simulation",
    "br_sgdm_round",
    "byrd_svrg_round",
    "csgd_round",
    "gradient_descent",
    "init_g0",
    "marina_round",
    "replay_round",
    "run_rounds",
    "sgd_round",
    "TheoryInputs",
    "TheoryOutputs",
    "compute_A",
    "evaluate",
    "gamma_bounds",
    "fit_heterogeneity",
    "measure_heterogeneity",
    "measure_round_bounds",
    "phi0",
    "predict_rounds",
    "nonconvex_bound",
    "pl_bound",
    "RunConfig",
    "compute_fstar",
    "load_config",
    "relative_compression",
    "run",
    "run_cell",
    "summarize",
]
