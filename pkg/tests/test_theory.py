import math

import numpy as np
import pytest

from byzopt.aggregation import Aggregator
from byzopt.compression import Compressor
from byzopt.data import build_pool, make_quadratic
from byzopt.models import ConfigError, InfeasibleBoundError, RoundRecord
from byzopt.optimizers import run_rounds
from byzopt.problems import LossModel, full_grad, hessian_variance_bound, quadratic_constants, smoothness_table
from byzopt.theory import (
    TheoryInputs,
    compute_A,
    evaluate,
    fit_heterogeneity,
    gamma_bounds,
    measure_heterogeneity,
    measure_round_bounds,
    neighborhoods,
    nonconvex_bound,
    phi0,
    pl_bound,
    predict_rounds,
)

from conftest import make_sim


def _random_inputs(rng, **fixed):
    values = dict(
        L=rng.uniform(0.1, 5.0),
        L_pm=rng.uniform(0.0, 2.0),
        calL_pm=rng.uniform(0.0, 3.0),
        mu=rng.uniform(0.0, 1.0),
        p=rng.uniform(0.05, 1.0),
        b=int(rng.integers(1, 32)),
        omega=rng.uniform(0.0, 20.0),
        G=int(rng.integers(1, 50)),
        c=rng.uniform(0.0, 4.0),
        delta=rng.uniform(0.0, 0.2),
        B=0.0,
        zeta2=rng.uniform(0.0, 1.0),
    )
    values.update(fixed)
    return TheoryInputs(**values)


def test_A_for_a_worked_example():
    inp = TheoryInputs(L=1.0, L_pm=1.0, calL_pm=1.0, p=0.5, b=1, omega=1.0, G=4, c=1.0, delta=0.1)
    assert math.isclose(compute_A(inp), 27.0, rel_tol=1e-12)


def test_full_synchronisation_removes_A():
    inp = TheoryInputs(L=2.0, L_pm=1.0, calL_pm=3.0, p=1.0, omega=5.0, G=3, c=1.0, delta=0.2)
    assert compute_A(inp) == 0.0
    gamma_nc, _, _, _ = gamma_bounds(inp)
    assert gamma_nc == pytest.approx(0.5)


def test_pl_ceiling_caps_at_strong_convexity():
    inp = TheoryInputs(L=1.0, mu=1e6, p=0.2)
    _, gamma_pl, _, _ = gamma_bounds(inp)
    assert gamma_pl == pytest.approx(0.2 / 4e6)


def test_ceiling_solves_the_step_condition(rng):
    for _ in range(200):
        inp = _random_inputs(rng)
        A = compute_A(inp)
        gamma_nc, gamma_pl, _, _ = gamma_bounds(inp)
        assert A * gamma_nc**2 + inp.L * gamma_nc <= 1 + 1e-12
        assert gamma_pl <= gamma_nc


def test_A_monotonicity(rng):
    for _ in range(100):
        base = _random_inputs(rng, p=rng.uniform(0.05, 0.95))
        A = compute_A(base)
        assert compute_A(_random_inputs_like(base, omega=base.omega + 1.0)) >= A
        assert compute_A(_random_inputs_like(base, delta=min(base.delta + 0.1, 0.49))) >= A
        assert compute_A(_random_inputs_like(base, b=base.b + 5)) <= A
        assert compute_A(_random_inputs_like(base, G=base.G + 5)) <= A
        assert compute_A(_random_inputs_like(base, p=min(base.p + 0.04, 1.0))) <= A


def _random_inputs_like(inp, **changes):
    values = {name: getattr(inp, name) for name in inp.__dataclass_fields__}
    values.update(changes)
    return TheoryInputs(**values)


def test_honest_bound_decays_like_one_over_K():
    inp = TheoryInputs(L=1.0, calL_pm=0.5, p=0.3, b=2, omega=2.0, G=4)
    gamma = gamma_bounds(inp)[0]
    first = nonconvex_bound(inp, 3.0, 100, gamma)
    second = nonconvex_bound(inp, 3.0, 200, gamma)

    assert first.admissible
    assert first.value == pytest.approx(2 * 3.0 / (gamma * 101))
    assert 0.45 <= second.value / first.value <= 0.55


def test_neighbourhood_terms():
    inp = TheoryInputs(L=1.0, mu=0.5, p=0.5, c=2.0, delta=0.1, zeta2=3.0)
    nc, pl = neighborhoods(inp)
    assert nc == pytest.approx(28.8)
    assert pl == pytest.approx(28.8 / 0.5)

    out = evaluate(inp)
    assert out.neighborhood_nc == pytest.approx(28.8)
    assert nonconvex_bound(inp, 0.0, 10, out.gamma_max_nc).value == pytest.approx(28.8)


def test_pl_bound_contracts_to_the_neighbourhood():
    inp = TheoryInputs(L=1.0, mu=0.2, p=0.5, c=1.0, delta=0.05, zeta2=0.5, B=0.1)
    out = evaluate(inp)
    assert out.feasible_pl
    far = pl_bound(inp, 10.0, 100_000, out.gamma_max_pl)
    assert far.value == pytest.approx(out.neighborhood_pl, rel=1e-9)


def test_infeasible_configuration():
    inp = TheoryInputs(L=1.0, mu=0.1, p=0.5, c=1.0, delta=0.4, B=1.0, zeta2=1.0)
    out = evaluate(inp)

    assert not out.feasible_nc and not out.feasible_pl
    assert math.isnan(out.gamma_max_nc) and math.isnan(out.gamma_max_pl)
    with pytest.raises(InfeasibleBoundError):
        nonconvex_bound(inp, 1.0, 10, 0.1)
    with pytest.raises(InfeasibleBoundError):
        pl_bound(inp, 1.0, 10, 0.1)
    assert math.isnan(predict_rounds(inp, 1.0, 1.0))


def test_pl_bound_needs_strong_convexity():
    with pytest.raises(InfeasibleBoundError):
        pl_bound(TheoryInputs(L=1.0), 1.0, 10, 0.1)


def test_oversized_step_is_flagged():
    inp = TheoryInputs(L=1.0, p=0.5, omega=1.0, calL_pm=1.0)
    gamma = gamma_bounds(inp)[0]
    assert not nonconvex_bound(inp, 1.0, 10, 2 * gamma).admissible


def test_predicted_rounds_are_tight():
    inp = TheoryInputs(L=1.0, calL_pm=0.7, p=0.25, b=4, omega=3.0, G=5, c=1.0, delta=0.1, zeta2=0.001)
    gamma = gamma_bounds(inp)[0]
    eps, start = 0.05, 2.3
    K = predict_rounds(inp, eps, start)

    assert nonconvex_bound(inp, start, K, gamma).value <= eps
    assert nonconvex_bound(inp, start, K - 1, gamma).value > eps
    assert predict_rounds(inp, neighborhoods(inp)[0], start) == math.inf


def test_predicted_pl_rounds():
    inp = TheoryInputs(L=1.0, mu=0.1, p=0.5, omega=1.0)
    gamma = gamma_bounds(inp)[1]
    K = predict_rounds(inp, 1e-6, 1.0, pl=True)
    assert pl_bound(inp, 1.0, K, gamma).value <= 1e-6
    assert pl_bound(inp, 1.0, K - 1, gamma).value > 1e-6


def test_pl_rounds_for_a_step_without_contraction():
    inp = TheoryInputs(L=1.0, mu=0.5, p=1.0)
    assert math.isnan(predict_rounds(inp, 1e-6, 1.0, gamma=4.0, pl=True))
    assert math.isnan(predict_rounds(inp, 1e-6, 1.0, gamma=2.0, pl=True))


def test_input_validation():
    with pytest.raises(ValueError):
        TheoryInputs(L=1.0, p=0.0)
    with pytest.raises(ValueError):
        TheoryInputs(L=1.0, p=1.5)
    with pytest.raises(ValueError):
        TheoryInputs(L=1.0, delta=0.5)
    with pytest.raises(ConfigError) as excinfo:
        TheoryInputs.from_mapping({"L_pm": 1.0, "kappa": 3.0})
    assert len(excinfo.value.problems) == 2


def test_phi0():
    assert phi0(3.0, 1.0, 0.5, 0.1, 0.25) == pytest.approx(2.2)
    assert phi0(3.0, 1.0, 0.5, 0.1, 0.25, pl=True) == pytest.approx(2.4)


def test_identical_shards_have_no_heterogeneity(small_logistic):
    pool = build_pool(small_logistic, 2, 0)
    points = [np.zeros(small_logistic.dim), np.ones(small_logistic.dim)]
    het = measure_heterogeneity(LossModel("logistic_l2", 0.01), pool.good, points)
    assert het.zeta2 == 0.0


def test_disjoint_shards_are_heterogeneous(small_logistic):
    model = LossModel("logistic_l2", 0.01)
    pool = build_pool(small_logistic, 4, 0, "disjoint_shuffle")
    x = np.full(small_logistic.dim, 0.5)
    het = measure_heterogeneity(model, pool.good, [x])

    local = np.array([full_grad(model, s, x) for s in pool.good])
    direct = np.mean(np.sum((local - local.mean(axis=0)) ** 2, axis=1))
    assert het.zeta2 > 0
    assert het.lhs[0] == pytest.approx(direct, rel=1e-12)


def test_heterogeneity_fit_is_non_negative():
    B, zeta2 = fit_heterogeneity([5.0, 3.0, 1.0], [0.0, 1.0, 2.0])
    assert B == pytest.approx(0.0, abs=1e-12)
    assert zeta2 == pytest.approx(3.0)

    B, zeta2 = fit_heterogeneity([1.0, 3.0, 5.0], [0.0, 1.0, 2.0])
    assert B == pytest.approx(2.0)
    assert zeta2 == pytest.approx(1.0)

    assert fit_heterogeneity([0.7], [4.0]) == (0.0, 0.7)


def test_distortion_bound_coefficients():
    inp = TheoryInputs(L=1.0, L_pm=1.0, calL_pm=1.0, p=0.5, b=1, omega=1.0, G=4, c=1.0, delta=0.1)
    replay = dict(var_mean=0.0, var_se=0.0, dist_mean=0.5, dist_se=0.0, dx_sq=0.2, grad_sq=0.0, gdist_sq=0.4)
    record = RoundRecord(3, 0.0, 0.0, 0, 0, 0.0, 0.0, replay=replay)

    (check,) = measure_round_bounds([record], inp)
    assert check.k == 3
    assert check.dist_rhs == pytest.approx(0.75 * 0.4 + 0.125 * 27.0 * 0.2)
    assert not check.dist_violated

    tight = dict(replay, dist_mean=check.dist_rhs + 0.01)
    (check,) = measure_round_bounds([RoundRecord(3, 0.0, 0.0, 0, 0, 0.0, 0.0, replay=tight)], inp)
    assert check.dist_violated


def test_one_round_bounds_hold_in_replays(small_logistic):
    d = small_logistic.dim
    sim = make_sim(small_logistic, n_workers=4, compressor=Compressor.rand_k(d, 2), batch_size=4)
    traj = run_rounds(sim, "marina", np.zeros(d), gamma=0.5, rounds=50, p=0.3, diag_replays=100)

    table = smoothness_table(sim.model, sim.pool.good)
    inp = TheoryInputs(
        L=table.global_L,
        calL_pm=hessian_variance_bound(table, "uniform"),
        p=0.3,
        b=4,
        omega=3.0,
        G=4,
    )
    checks = measure_round_bounds(traj.records, inp)
    assert len(checks) == 50
    assert not any(c.var_violated or c.dist_violated for c in checks)


@pytest.mark.parametrize("K", [100, 1000])
def test_nonconvex_bound_holds_on_quadratic(K):
    ds = make_quadratic(samples=200, dim=10, seed=0)
    model = LossModel("quadratic")
    consts = quadratic_constants(build_pool(ds, 4, 0, "disjoint_shuffle").good)
    inp = TheoryInputs(
        L=consts.L,
        L_pm=consts.L_pm,
        calL_pm=consts.calL_pm,
        mu=consts.mu,
        p=0.1,
        b=4,
        omega=9.0,
        G=4,
    )
    gamma = gamma_bounds(inp)[0]

    averages, bounds = [], []
    for seed in range(20):
        sim = make_sim(
            ds,
            n_workers=4,
            model=model,
            compressor=Compressor.rand_k(10, 1),
            aggregator=Aggregator("mean", bucket_size=1),
            mode="disjoint_shuffle",
            seed=seed,
        )
        traj = run_rounds(sim, "marina", np.zeros(10), gamma=gamma, rounds=K, p=0.1)
        start = traj.records[0]
        averages.append(np.mean([rec.grad_norm_sq for rec in traj.records]))
        bounds.append(nonconvex_bound(inp, phi0(start.loss, consts.f_star, start.diag_gdist, gamma, 0.1), K, gamma).value)

    assert np.mean(averages) <= np.mean(bounds)
