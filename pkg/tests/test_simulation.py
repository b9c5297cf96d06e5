import numpy as np
import pytest
from scipy.special import expit

from clusterbal.errors import EstimationError
from clusterbal.simulation import (
    BINARY_COLS,
    SimConfig,
    aggregate_records,
    generate,
    run_monte_carlo,
    treatment_index,
)

BASE = dict(n_clusters=12, units_per_cluster=20, n_reps=2, seed=77,
            estimators=({"method": "standard-bw"},))


def test_no_cluster_effect_makes_propensity_cluster_free():
    cfg = SimConfig(rho_u=0.0, **BASE)
    ds, truth = generate(cfg, 0)
    # two units with identical covariates in different clusters get the same e
    f = treatment_index(ds.X, np.zeros(ds.n), 0.0, 0.0)
    np.testing.assert_allclose(truth.propensity, 0.8 * expit(f) + 0.15, atol=1e-12)


def test_propensity_range():
    cfg = SimConfig(rho_u=0.5, **BASE)
    for rep in range(3):
        _, truth = generate(cfg, rep)
        assert truth.propensity.min() > 0.15 - 1e-12
        assert truth.propensity.max() < 0.95 + 1e-12


def test_binary_columns_and_continuous_columns():
    cfg = SimConfig(rho_u=0.25, **BASE)
    ds, _ = generate(cfg, 1)
    for j in range(10):
        values = np.unique(ds.X[:, j])
        if j in BINARY_COLS:
            assert set(values).issubset({0.0, 1.0})
        else:
            assert len(values) > 2


def test_treated_share_matches_mean_propensity():
    cfg = SimConfig(n_clusters=100, units_per_cluster=1000, rho_u=0.0, n_reps=1,
                    seed=5, estimators=({"method": "standard-bw"},))
    ds, truth = generate(cfg, 0)
    n = ds.n
    expect = truth.propensity.mean()
    sd = np.sqrt(expect * (1 - expect) / n)
    assert abs(ds.n1 / n - expect) <= 3 * sd


def test_outcome_noise_variance_recovery():
    cfg = SimConfig(n_clusters=60, units_per_cluster=400, rho_u=0.5, n_reps=1,
                    seed=9, estimators=({"method": "standard-bw"},))
    ds, truth = generate(cfg, 0)
    # regress y - tau*z on the true design; residual variance ~ noise_sd^2 = 2
    cols = [np.ones(ds.n)]
    cols += [ds.X[:, j] for j in (0, 1, 2, 3, 7, 8, 9)]
    cols.append(truth.cluster_u[ds.cluster_codes])
    Xd = np.column_stack(cols)
    yy = ds.y - cfg.tau * ds.z
    beta, *_ = np.linalg.lstsq(Xd, yy, rcond=None)
    resid = yy - Xd @ beta
    assert np.var(resid) == pytest.approx(2.0, rel=0.02)


def test_generate_deterministic():
    cfg = SimConfig(rho_u=0.25, **BASE)
    a, ta = generate(cfg, 3)
    b, tb = generate(cfg, 3)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.z, b.z)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(ta.cluster_u, tb.cluster_u)


def test_poisson_sizes_floor_at_one():
    cfg = SimConfig(n_clusters=50, units_per_cluster=2, size_distribution="poisson",
                    rho_u=0.0, n_reps=1, seed=13,
                    estimators=({"method": "standard-bw"},))
    ds, _ = generate(cfg, 0)
    assert min(ds.n_g) >= 1


def test_config_validation():
    with pytest.raises(EstimationError):
        SimConfig(n_clusters=1, estimators=({"method": "standard-bw"},)).validate()
    with pytest.raises(EstimationError):
        SimConfig(n_reps=0, estimators=({"method": "standard-bw"},)).validate()
    with pytest.raises(EstimationError):
        SimConfig(estimators=({"method": "nope"},)).validate()
    with pytest.raises(EstimationError):
        SimConfig(estimators=()).validate()


def test_alpha_u_resolution():
    assert SimConfig(rho_u=0.5).resolved_alpha_u() == 0.5
    assert SimConfig(rho_u=0.0).resolved_alpha_u() == 0.0
    assert SimConfig(rho_u=0.5, alpha_u=0.2).resolved_alpha_u() == 0.2


def test_oracle_estimator_zero_bias_and_rmse():
    # feed records from a perfect estimator through the aggregator
    cfg = SimConfig(rho_u=0.0, n_reps=50, seed=1,
                    estimators=({"method": "standard-bw", "label": "oracle"},))
    records = [
        {"rep": r, "estimator": "oracle", "failed": False, "att": cfg.tau,
         "ci_low": cfg.tau - 0.1, "ci_high": cfg.tau + 0.1, "ess": 10.0,
         "dropped_clusters": 0}
        for r in range(50)
    ]
    metrics = aggregate_records(cfg, records)["oracle"]
    assert metrics["standardized_abs_bias"] == pytest.approx(0.0, abs=1e-14)
    assert metrics["rmse"] == pytest.approx(0.0, abs=1e-14)
    assert metrics["ci_coverage"] == 1.0


def test_noisy_estimator_rmse_recovers_sigma():
    rng = np.random.default_rng(2)
    sigma = 0.35
    n_reps = 400
    cfg = SimConfig(rho_u=0.0, n_reps=n_reps, seed=1,
                    estimators=({"method": "standard-bw", "label": "noisy"},))
    noise = rng.normal(0, sigma, size=n_reps)
    records = [
        {"rep": r, "estimator": "noisy", "failed": False,
         "att": cfg.tau + noise[r], "ci_low": -10.0, "ci_high": 10.0,
         "ess": 1.0, "dropped_clusters": 0}
        for r in range(n_reps)
    ]
    metrics = aggregate_records(cfg, records)["noisy"]
    tol = 3 * sigma / np.sqrt(2 * n_reps)
    assert abs(metrics["rmse"] - sigma) <= tol + abs(noise.mean())


def test_rmse_at_least_abs_bias():
    cfg = SimConfig(rho_u=0.25, n_clusters=10, units_per_cluster=30, n_reps=3,
                    seed=3, estimators=({"method": "standard-bw", "infeasible": "penalty"},))
    res = run_monte_carlo(cfg)
    m = res.per_estimator["standard-bw"]
    assert m["rmse"] ** 2 >= m["abs_bias"] ** 2 - 1e-9


def test_monte_carlo_determinism_and_order_independence():
    cfg = SimConfig(rho_u=0.25, n_clusters=8, units_per_cluster=25, n_reps=3,
                    seed=11, estimators=(
                        {"method": "standard-bw", "infeasible": "penalty"},
                        {"method": "ri-ipw"},
                    ))
    r1 = run_monte_carlo(cfg)
    r2 = run_monte_carlo(cfg)
    assert r1.per_estimator == r2.per_estimator
    # aggregates only depend on records through rep order, not execution order
    shuffled = list(reversed(r1.records))
    assert aggregate_records(cfg, shuffled) == r1.per_estimator


def test_failures_are_recorded_not_raised():
    # tiny clusters with raw+squares features: infeasible for standard-bw
    cfg = SimConfig(rho_u=0.0, n_clusters=6, units_per_cluster=6, n_reps=2,
                    seed=21, estimators=({"method": "standard-bw"},))
    res = run_monte_carlo(cfg)
    m = res.per_estimator["standard-bw"]
    assert m["failure_rate"] > 0
    failed = [r for r in res.records if r["failed"]]
    assert failed and all(r["error"] for r in failed)


def test_per_estimator_cluster_filtering():
    # force a degenerate cluster by tiny cluster sizes, then check that
    # hierarchical drops it while standard keeps all
    cfg = SimConfig(n_clusters=30, units_per_cluster=3, size_distribution="poisson",
                    rho_u=0.0, n_reps=1, seed=6,
                    estimators=(
                        {"method": "standard-bw", "infeasible": "penalty"},
                        {"method": "hierarchical-bw", "infeasible": "penalty"},
                    ))
    res = run_monte_carlo(cfg)
    recs = {r["estimator"]: r for r in res.records}
    assert recs["standard-bw"]["dropped_clusters"] == 0
    assert recs["hierarchical-bw"]["dropped_clusters"] > 0
