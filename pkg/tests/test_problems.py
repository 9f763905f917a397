import itertools
import math

import numpy as np
import pytest

from byzopt.data import build_pool, make_quadratic
from byzopt.models import DimensionMismatchError, WorkerShard
from byzopt.problems import (
    DeltaEstimator,
    LossModel,
    delta_hat,
    draw_batch,
    full_grad,
    grad_sample,
    hessian_variance_bound,
    importance_probabilities,
    loss,
    minibatch_grad,
    objective,
    objective_grad,
    quadratic_constants,
    sample_smoothness,
    smoothness_table,
)


def _dense_shard(rng, m=5, d=3, scale=None):
    scale = np.linspace(0.5, 2.0, m) if scale is None else scale
    features = rng.standard_normal((m, d)) * scale[:, None]
    labels = (rng.random(m) < 0.5).astype(np.int64)
    return WorkerShard(worker_id=0, features=features, labels=labels)


def test_loss_at_origin_is_log_two(small_logistic):
    shard = build_pool(small_logistic, 1, 0).good[0]
    x = np.zeros(small_logistic.dim)
    for lam in (0.0, 0.01):
        assert math.isclose(loss(LossModel("logistic_l2", lam), shard, x), math.log(2.0), rel_tol=1e-12)


def test_loss_matches_direct_formula(rng):
    shard = _dense_shard(rng)
    model = LossModel("logistic_l2", 0.05)
    x = rng.standard_normal(3)

    h = 1.0 / (1.0 + np.exp(-(shard.features @ x)))
    y = shard.labels
    expected = np.mean(-y * np.log(h) - (1 - y) * np.log(1 - h)) + 0.05 * x @ x

    assert math.isclose(loss(model, shard, x), expected, rel_tol=1e-12)


def test_gradient_at_origin():
    shard = WorkerShard(worker_id=0, features=np.array([[1.0, -2.0]]), labels=np.array([1]))
    g = grad_sample(LossModel("logistic_l2", 0.0), shard, np.zeros(2))
    np.testing.assert_array_equal(g, np.array([-0.5, 1.0]))


@pytest.mark.parametrize("kind", ["logistic_l2", "logistic_nonconvex"])
def test_gradient_matches_finite_differences(kind, rng):
    shard = _dense_shard(rng, m=6, d=4)
    model = LossModel(kind, 0.1)
    eps = 1e-6
    for _ in range(20):
        x = rng.standard_normal(4)
        g = full_grad(model, shard, x)
        fd = np.array(
            [(loss(model, shard, x + eps * e) - loss(model, shard, x - eps * e)) / (2 * eps) for e in np.eye(4)]
        )
        assert np.linalg.norm(fd - g) <= 1e-5 * max(np.linalg.norm(g), 1e-8)


def test_nonconvex_regularizer_vanishes_at_origin(rng):
    shard = _dense_shard(rng)
    x = np.zeros(3)
    plain = full_grad(LossModel("logistic_l2", 0.0), shard, x)
    np.testing.assert_array_equal(full_grad(LossModel("logistic_nonconvex", 0.5), shard, x), plain)


def test_single_sample_shard_gradients_agree(rng):
    shard = _dense_shard(rng, m=1)
    model = LossModel("logistic_l2", 0.01)
    x = rng.standard_normal(3)
    np.testing.assert_array_equal(full_grad(model, shard, x), grad_sample(model, shard.sample(0), x))

    doubled = WorkerShard(0, np.vstack([shard.features, shard.features]), np.repeat(shard.labels, 2))
    np.testing.assert_allclose(full_grad(model, doubled, x), full_grad(model, shard, x), rtol=1e-15, atol=1e-17)


def test_full_grad_is_mean_of_sample_gradients(rng):
    shard = _dense_shard(rng, m=7)
    model = LossModel("logistic_nonconvex", 0.2)
    x = rng.standard_normal(3)
    per_sample = np.mean([grad_sample(model, shard.sample(j), x) for j in range(shard.m)], axis=0)
    np.testing.assert_allclose(full_grad(model, shard, x), per_sample, rtol=1e-12, atol=1e-14)


def test_grad_sample_rejects_multi_row_shard(rng):
    with pytest.raises(ValueError):
        grad_sample(LossModel(), _dense_shard(rng), np.zeros(3))


def test_dimension_mismatch(rng):
    shard = _dense_shard(rng)
    with pytest.raises(DimensionMismatchError):
        full_grad(LossModel(), shard, np.zeros(4))
    with pytest.raises(DimensionMismatchError):
        delta_hat(DeltaEstimator(), LossModel(), shard, np.zeros(3), np.zeros(2), rng)


@pytest.mark.parametrize("scheme", ["uniform", "importance"])
def test_delta_hat_is_zero_when_points_coincide(scheme, rng):
    shard = _dense_shard(rng)
    x = rng.standard_normal(3)
    est = DeltaEstimator(scheme, 3)
    np.testing.assert_array_equal(delta_hat(est, LossModel("logistic_l2", 0.1), shard, x, x, rng), np.zeros(3))


@pytest.mark.parametrize("scheme", ["uniform", "importance"])
@pytest.mark.parametrize("batch_size", [1, 2])
def test_delta_hat_is_unbiased_by_enumeration(scheme, batch_size, rng):
    shard = _dense_shard(rng, m=4)
    model = LossModel("logistic_l2", 0.05)
    x, y = rng.standard_normal(3), rng.standard_normal(3)

    L = sample_smoothness(model, shard)
    probs = np.full(shard.m, 1.0 / shard.m) if scheme == "uniform" else importance_probabilities(L)
    expected = np.zeros(3)
    for combo in itertools.product(range(shard.m), repeat=batch_size):
        idx = np.array(combo)
        weights = None if scheme == "uniform" else L.mean() / L[idx]
        diff = minibatch_grad(model, shard, x, idx, weights) - minibatch_grad(model, shard, y, idx, weights)
        expected += np.prod(probs[idx]) * diff

    truth = full_grad(model, shard, x) - full_grad(model, shard, y)
    np.testing.assert_allclose(expected, truth, rtol=0, atol=1e-12)


def test_importance_equals_uniform_when_constants_match():
    shard = WorkerShard(worker_id=0, features=np.eye(3), labels=np.array([1, 0, 1]))
    model = LossModel("logistic_l2", 0.0)
    x, y = np.array([0.3, -1.0, 2.0]), np.array([1.0, 0.5, -0.5])

    a = delta_hat(DeltaEstimator("uniform", 2), model, shard, x, y, np.random.default_rng(5))
    b = delta_hat(DeltaEstimator("importance", 2), model, shard, x, y, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_importance_probabilities_sum_to_one(rng):
    L = sample_smoothness(LossModel("logistic_l2", 0.01), _dense_shard(rng, m=9))
    assert math.isclose(importance_probabilities(L).sum(), 1.0, abs_tol=1e-15)


def test_importance_weights_follow_constants(rng):
    shard = _dense_shard(rng)
    model = LossModel("logistic_l2", 0.0)
    L = sample_smoothness(model, shard)
    idx, weights = draw_batch(DeltaEstimator("importance", 50), model, shard, rng)
    np.testing.assert_allclose(weights, L.mean() / L[idx])


def test_smoothness_examples():
    model = LossModel("logistic_l2", 0.0)
    shard = WorkerShard(worker_id=0, features=np.array([[1.0, 0.0], [0.0, 0.0]]), labels=np.array([1, 0]))
    np.testing.assert_allclose(sample_smoothness(model, shard), [0.25, 0.0])
    np.testing.assert_allclose(sample_smoothness(LossModel("logistic_l2", 0.01), shard), [0.27, 0.02])

    table = smoothness_table(model, [shard, shard])
    assert table.global_L == pytest.approx(0.125)


def test_per_sample_constants_bound_gradient_differences(rng):
    shard = _dense_shard(rng, m=6, d=4)
    for kind in ("logistic_l2", "logistic_nonconvex"):
        model = LossModel(kind, 0.1)
        L = sample_smoothness(model, shard)
        for _ in range(200):
            x, y = 3 * rng.standard_normal(4), 3 * rng.standard_normal(4)
            j = int(rng.integers(shard.m))
            row = shard.sample(j)
            gap = np.linalg.norm(grad_sample(model, row, x) - grad_sample(model, row, y))
            assert gap <= L[j] * np.linalg.norm(x - y) + 1e-12


def test_smoothness_table_rejects_quadratic():
    pool = build_pool(make_quadratic(samples=10, dim=2), 1, 0)
    with pytest.raises(ValueError):
        smoothness_table(LossModel("quadratic"), pool.good)


@pytest.mark.parametrize("scheme", ["uniform", "importance"])
def test_estimator_variance_respects_bound(scheme, rng):
    shard = _dense_shard(rng, m=8, d=3)
    model = LossModel("logistic_l2", 0.01)
    bound = hessian_variance_bound(smoothness_table(model, [shard]), scheme)
    est = DeltaEstimator(scheme, 2)

    for _ in range(3):
        x, y = rng.standard_normal(3), rng.standard_normal(3)
        truth = full_grad(model, shard, x) - full_grad(model, shard, y)
        errs = np.array([np.sum((delta_hat(est, model, shard, x, y, rng) - truth) ** 2) for _ in range(4000)])
        se = errs.std(ddof=1) / math.sqrt(errs.size)
        assert errs.mean() <= bound**2 / est.batch_size * np.sum((x - y) ** 2) + 3 * se


def test_quadratic_constants():
    ds = make_quadratic(samples=60, dim=4, seed=3)
    pool = build_pool(ds, 3, 0, "disjoint_shuffle")
    model = LossModel("quadratic")
    consts = quadratic_constants(pool.good)

    np.testing.assert_allclose(objective_grad(model, pool.good, consts.x_star), 0.0, atol=1e-12)
    assert consts.f_star == pytest.approx(objective(model, pool.good, consts.x_star))
    assert consts.mu <= consts.L
    assert consts.L_pm > 0 and consts.calL_pm > 0


def test_shared_curvature_has_no_curvature_spread():
    ds = make_quadratic(samples=30, dim=3, shared_curvature=True)
    pool = build_pool(ds, 3, 0, "disjoint_shuffle")
    consts = quadratic_constants(pool.good)
    assert consts.L_pm == pytest.approx(0.0, abs=1e-12)
    assert consts.calL_pm == pytest.approx(0.0, abs=1e-12)
