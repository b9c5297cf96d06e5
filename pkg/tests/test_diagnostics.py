import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterbal.data import Dataset
from clusterbal.diagnostics import (
    ZeroSpreadWarning,
    balance_report,
    ess,
    l2_aggregate,
    pbr,
    smd,
)
from clusterbal.errors import EstimationError
from conftest import make_random_dataset
from oracles import ess_direct, l2_direct, pbr_direct, smd_direct


def dataset(X, z, groups, y=None):
    X = np.asarray(X, dtype=float)
    y = np.zeros(X.shape[0]) if y is None else y
    return Dataset(X, z, groups, y=y)


def test_smd_zero_for_identical_distributions():
    rng = np.random.default_rng(0)
    Xt = rng.normal(size=(8, 2))
    ds = dataset(np.vstack([Xt, Xt]), [1] * 8 + [0] * 8, ["a"] * 16)
    sg, sl, zero, miss = smd(ds, ds.X, None)
    np.testing.assert_allclose(sg, 0.0, atol=1e-12)


def test_smd_hand_value():
    # treated mean 1, control mean 0, pooled sd 1
    treated = np.array([0.0, 2.0])     # mean 1, var 2
    controls = np.array([0.0, 0.0])    # mean 0, var 0 -> pooled sd = 1
    X = np.concatenate([treated, controls])[:, None]
    ds = dataset(X, [1, 1, 0, 0], ["a"] * 4)
    sg, *_ = smd(ds, ds.X, None)
    assert sg[0] == pytest.approx(1.0)


def test_smd_matches_direct_summation():
    rng = np.random.default_rng(1)
    ds = make_random_dataset(rng, n_clusters=3, units=9, n_cov=3)
    w = np.ones(ds.n)
    w[ds.z == 0] = rng.uniform(0.2, 2.5, size=ds.n0)
    sg, *_ = smd(ds, ds.X, w)
    for j in range(3):
        expect = smd_direct(ds.X[:, j].tolist(), ds.z.tolist(), w.tolist())
        assert sg[j] == pytest.approx(expect, rel=1e-12)


def test_smd_local_missing_for_degenerate_cluster():
    X = np.arange(6, dtype=float)[:, None]
    ds = dataset(X, [1, 0, 0, 0, 1, 1], ["a", "a", "a", "b", "c", "c"])
    sg, sl, zero, miss = smd(ds, ds.X, None)
    assert np.isnan(sl[1, 0])  # cluster b: controls only
    assert np.isnan(sl[2, 0])  # cluster c: treated only
    assert miss == 2


def test_smd_zero_sd_feature_flagged():
    X = np.column_stack([np.ones(6), np.arange(6, dtype=float)])
    ds = dataset(X, [1, 0, 1, 0, 1, 0], ["a"] * 6)
    with pytest.warns(ZeroSpreadWarning):
        sg, sl, zero, miss = smd(ds, ds.X, None)
    assert zero == [0]
    assert np.isnan(sg[0])


def test_l2_hand_values():
    g = np.array([0.3, 0.4])
    l = np.array([[0.0]])
    l2g, l2l = l2_aggregate(g, l)
    assert l2g == pytest.approx(np.sqrt((0.09 + 0.16) / 2))
    assert l2g == pytest.approx(0.35355339059327379)


def test_l2_all_zero():
    l2g, l2l = l2_aggregate(np.zeros(4), np.zeros((3, 4)))
    assert l2g == 0.0 and l2l == 0.0


def test_l2_construction_target_point_33():
    # an SMD vector with RMS 0.33 aggregates to exactly 0.33
    g = np.full(11, 0.33)
    l2g, _ = l2_aggregate(g, np.full((2, 11), np.nan))
    assert l2g == pytest.approx(0.33)


def test_l2_matches_direct():
    rng = np.random.default_rng(2)
    g = rng.normal(size=7)
    l = rng.normal(size=(4, 7))
    l[0, 3] = np.nan
    l2g, l2l = l2_aggregate(g, l)
    assert l2g == pytest.approx(l2_direct(g.tolist()), rel=1e-12)
    assert l2l == pytest.approx(l2_direct(l.ravel().tolist()), rel=1e-12)


def test_l2_errors_when_all_missing():
    with pytest.raises(EstimationError):
        l2_aggregate(np.full(3, np.nan), np.full((2, 3), np.nan))


def test_pbr_cases():
    assert pbr(0.5, 0.5) == pytest.approx(0.0)
    assert pbr(0.26, 0.05) == pytest.approx(80.76923076923077)
    assert pbr(0.21, 0.02) == pytest.approx(90.47619047619048)
    assert pbr(0.0, 0.1) is None


def test_ess_cases():
    assert ess(np.ones(10)) == pytest.approx(10.0)
    assert ess([1.0, 1.0, 1.0, 3.0]) == pytest.approx(3.0)
    w = np.zeros(12)
    w[3] = 0.7
    assert ess(w) == pytest.approx(1.0)
    with pytest.raises(EstimationError):
        ess(np.zeros(3))
    with pytest.raises(EstimationError):
        ess([-1.0, 2.0])


def test_ess_matches_direct():
    rng = np.random.default_rng(3)
    w = rng.uniform(0.0, 3.0, size=40)
    assert ess(w) == pytest.approx(ess_direct(w.tolist()), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=0.01, max_value=50.0), min_size=1, max_size=40))
def test_ess_at_most_count_of_positive_weights(ws):
    w = np.asarray(ws)
    value = ess(w)
    npos = int((w > 0).sum())
    assert value <= npos + 1e-9
    if np.allclose(w, w[0]):
        assert value == pytest.approx(npos)


@settings(max_examples=30, deadline=None)
@given(
    scale=st.floats(min_value=0.01, max_value=100.0),
    shift=st.floats(min_value=-50.0, max_value=50.0),
)
def test_smd_affine_invariance(scale, shift):
    rng = np.random.default_rng(4)
    ds = make_random_dataset(rng, n_clusters=2, units=10, n_cov=1)
    w = np.ones(ds.n)
    w[ds.z == 0] = rng.uniform(0.5, 1.5, size=ds.n0)
    sg1, *_ = smd(ds, ds.X, w)
    ds2 = Dataset(scale * ds.X + shift, ds.z, ds.cluster_labels, y=ds.y)
    sg2, *_ = smd(ds2, ds2.X, w)
    np.testing.assert_allclose(sg1, sg2, atol=1e-8)


def test_exact_balance_gives_tiny_smd():
    from clusterbal.estimators import StandardBalancingWeights

    rng = np.random.default_rng(5)
    ds = make_random_dataset(rng, n_clusters=3, units=12, n_cov=2)
    est = StandardBalancingWeights(lam=1.0).fit_dataset(ds)
    fs = est.feature_set_
    sg, *_ = smd(ds, fs.unit_features, est.weights_)
    assert np.nanmax(np.abs(sg)) <= 1e-6


def test_balance_report_pbr_and_rows():
    from clusterbal.estimators import StandardBalancingWeights

    rng = np.random.default_rng(6)
    ds = make_random_dataset(rng, n_clusters=3, units=12, n_cov=2)
    est = StandardBalancingWeights(lam=1.0).fit_dataset(ds)
    rep = est.balance()
    assert rep.weighted
    assert rep.pbr_global is not None and rep.pbr_global > 0
    rows = rep.rows()
    blocks = {r[0] for r in rows}
    assert blocks == {"global", "local"}
    base = balance_report(ds, est.feature_set_.unit_features,
                          est.feature_set_.unit_feature_names, weights=None)
    assert base.pbr_global is None
    assert not base.weighted
    assert base.ess_control == pytest.approx(ds.n0)
    # the l2 invariant: recomputable from the per-feature arrays
    l2g, l2l = l2_aggregate(rep.smd_global, rep.smd_local)
    assert rep.l2_global == pytest.approx(l2g)
    assert rep.l2_local == pytest.approx(l2l)
