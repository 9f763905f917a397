import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

DATA_DIR = Path(__file__).resolve().parent / "data"

from byzopt.aggregation import Aggregator
from byzopt.attacks import Attack
from byzopt.compression import Compressor
from byzopt.data import build_pool, make_synthetic_logistic
from byzopt.optimizers import Simulation
from byzopt.problems import DeltaEstimator, LossModel
from byzopt.streams import RngStreams


@pytest.fixture
def data_dir():
    return DATA_DIR


@pytest.fixture
def small_logistic():
    return make_synthetic_logistic(samples=200, dim=8, seed=0)


def make_sim(
    dataset,
    n_workers=4,
    byz_count=0,
    model=None,
    aggregator=None,
    attack=None,
    compressor=None,
    batch_size=4,
    scheme="uniform",
    mode="full_copy",
    seed=1,
    enforce_sparsity=True,
):
    attack = attack or Attack("na")
    pool = build_pool(dataset, n_workers, byz_count, mode, seed=0, flip_byzantine_labels=attack.flips_labels)
    return Simulation(
        model=model or LossModel("logistic_l2", 0.01),
        pool=pool,
        estimator=DeltaEstimator(scheme, batch_size),
        aggregator=aggregator or Aggregator("mean", bucket_size=1),
        compressor=compressor or Compressor.identity(dataset.dim),
        attack=attack,
        streams=RngStreams(seed),
        enforce_sparsity=enforce_sparsity,
    )


@pytest.fixture
def sim_factory():
    return make_sim


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
