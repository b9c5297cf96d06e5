import numpy as np
import pytest

from clusterbal.data import Dataset
from clusterbal.errors import FeatureError
from clusterbal.features import (
    ConstantFeatureWarning,
    FeatureSpec,
    FeatureTerm,
    build_cluster_stats,
    build_feature_set,
    build_interactions,
    build_unit_features,
    default_feature_spec,
)


def dataset_from(X, z, groups):
    return Dataset(np.asarray(X, dtype=float), z, groups, y=np.zeros(len(z)))


def test_raw_terms_identity():
    X = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]
    ds = dataset_from(X, [1, 0, 0], ["a", "a", "a"])
    spec = FeatureSpec((FeatureTerm("raw", 0), FeatureTerm("raw", 1)), standardize=False)
    F, names, *_ = build_unit_features(ds, spec)
    np.testing.assert_array_equal(F, np.asarray(X))
    assert names == ["x1", "x2"]


def test_square_term_values():
    ds = dataset_from([[-1.0], [0.0], [2.0]], [1, 0, 0], ["a"] * 3)
    spec = FeatureSpec((FeatureTerm("square", 0),), standardize=False)
    F, names, *_ = build_unit_features(ds, spec)
    np.testing.assert_array_equal(F[:, 0], [1.0, 0.0, 4.0])
    assert names == ["x1^2"]


def test_simulation_spec_raw_plus_all_squares_has_20_columns():
    from clusterbal.simulation import SimConfig, generate

    ds, _ = generate(SimConfig(n_clusters=4, units_per_cluster=10, n_reps=1, seed=5), 0)
    terms = tuple(FeatureTerm("raw", j) for j in range(10)) + tuple(
        FeatureTerm("square", j) for j in range(10)
    )
    spec = FeatureSpec(terms, standardize=False)
    F, names, *_ = build_unit_features(ds, spec)
    assert F.shape[1] == 20


def test_standardization_and_constant_drop():
    rng = np.random.default_rng(0)
    X = np.column_stack([rng.normal(size=30), np.full(30, 2.0)])
    ds = dataset_from(X, [1] * 10 + [0] * 20, ["a"] * 30)
    spec = FeatureSpec((FeatureTerm("raw", 0), FeatureTerm("raw", 1)), standardize=True)
    with pytest.warns(ConstantFeatureWarning):
        F, names, centers, scales, dropped = build_unit_features(ds, spec)
    assert names == ["x1"]
    assert dropped == ["x2"]
    assert abs(F[:, 0].mean()) < 1e-10
    assert abs(F[:, 0].std(ddof=1) - 1.0) < 1e-10


def test_spec_validation_errors():
    ds = dataset_from([[0.0], [1.0]], [1, 0], ["a", "a"])
    with pytest.raises(FeatureError, match="out of range"):
        build_unit_features(ds, FeatureSpec((FeatureTerm("raw", 3),)))
    with pytest.raises(FeatureError, match="duplicate"):
        build_unit_features(
            ds, FeatureSpec((FeatureTerm("raw", 0), FeatureTerm("raw", 0)))
        )


def test_cluster_stats_treated_share():
    ds = dataset_from([[0.0]] * 4, [1, 0, 0, 1], ["g", "g", "g", "g"])
    S, names = build_cluster_stats(ds)
    assert names[-1] == "treated_share"
    assert S[0, -1] == pytest.approx(0.5)


def test_cluster_stats_single_unit_cluster():
    ds = dataset_from([[3.0], [1.0]], [1, 0], ["solo", "other"])
    S, _ = build_cluster_stats(ds)
    np.testing.assert_allclose(S[0], [3.0, 1.0])
    np.testing.assert_allclose(S[1], [1.0, 0.0])


def test_cluster_stats_match_groupby_oracle():
    rng = np.random.default_rng(42)
    n_clusters = 100
    sizes = rng.integers(1, 8, size=n_clusters)
    labels = [f"c{k}" for k in range(n_clusters) for _ in range(sizes[k])]
    n = len(labels)
    X = rng.normal(size=(n, 3))
    z = rng.integers(0, 2, size=n)
    if z.sum() == 0:
        z[0] = 1
    if z.sum() == n:
        z[0] = 0
    ds = dataset_from(X, z, labels)
    S, _ = build_cluster_stats(ds)
    # brute-force group-by
    for k, lab in enumerate(ds.clusters):
        rows = [i for i, L in enumerate(labels) if L == lab]
        expect = np.column_stack([X[rows], np.asarray(z)[rows, None]]).mean(axis=0)
        np.testing.assert_allclose(S[k], expect, atol=1e-12)


def test_interactions_trivial_product():
    ds = dataset_from([[0.0], [0.0]], [1, 0], ["g", "g"])
    F = np.array([[2.0], [1.0]])
    S = np.array([[0.5]])
    psi, names = build_interactions(ds, F, S, ["f"], ["s"])
    np.testing.assert_allclose(psi, [[1.0], [0.5]])
    assert names == ["f*s"]


def test_interactions_zero_stat_row():
    ds = dataset_from([[0.0], [0.0]], [1, 0], ["g", "g"])
    F = np.array([[2.0, 3.0], [1.0, -1.0]])
    S = np.zeros((1, 2))
    psi, _ = build_interactions(ds, F, S)
    assert np.all(psi == 0.0)


def test_interaction_column_count_1200():
    # choose d and p with d*p = 1200 (40 x 30)
    rng = np.random.default_rng(1)
    n = 60
    ds = dataset_from(rng.normal(size=(n, 1)), [1, 0] * 30, ["g1"] * 30 + ["g2"] * 30)
    F = rng.normal(size=(n, 40))
    S = rng.normal(size=(2, 30))
    psi, names = build_interactions(ds, F, S)
    assert psi.shape == (n, 1200)
    assert len(names) == 1200


def test_interaction_reconstruction_property():
    rng = np.random.default_rng(3)
    n = 24
    labels = ["a"] * 8 + ["b"] * 8 + ["c"] * 8
    ds = dataset_from(rng.normal(size=(n, 2)), rng.integers(0, 2, n).tolist(), labels)
    fs = build_feature_set(ds)
    d = fs.unit_features.shape[1]
    p = fs.cluster_stats.shape[1]
    broadcast = fs.unit_cluster_stats(ds)
    for j in range(d):
        for k in range(p):
            np.testing.assert_allclose(
                fs.interactions[:, j * p + k],
                fs.unit_features[:, j] * broadcast[:, k],
                atol=1e-14,
            )


def test_permutation_equivariance():
    rng = np.random.default_rng(9)
    n = 20
    X = rng.normal(size=(n, 2))
    z = rng.integers(0, 2, n)
    z[0], z[1] = 1, 0
    labels = [f"c{i % 3}" for i in range(n)]
    ds = dataset_from(X, z, labels)
    fs = build_feature_set(ds)

    perm = rng.permutation(n)
    ds_p = dataset_from(X[perm], z[perm], [labels[i] for i in perm])
    fs_p = build_feature_set(ds_p)
    np.testing.assert_allclose(fs_p.unit_features, fs.unit_features[perm], atol=1e-12)
    np.testing.assert_allclose(fs_p.interactions, fs.interactions[perm], atol=1e-12)
    # cluster stats invariant to unit order within cluster (rows may be
    # reordered by first appearance; compare by label)
    for lab in ds.clusters:
        k = ds.clusters.index(lab)
        kp = ds_p.clusters.index(lab)
        np.testing.assert_allclose(fs_p.cluster_stats[kp], fs.cluster_stats[k], atol=1e-12)


def test_include_intercept_column_exempt_from_standardization():
    rng = np.random.default_rng(12)
    ds = dataset_from(rng.normal(size=(12, 1)), [1, 0] * 6, ["a"] * 12)
    spec = FeatureSpec((FeatureTerm("raw", 0),), standardize=True, include_intercept=True)
    F, names, *_ = build_unit_features(ds, spec)
    assert names == ["x1", "(intercept)"]
    np.testing.assert_array_equal(F[:, 1], 1.0)


def test_default_spec_squares_continuous_only():
    X = np.column_stack([
        np.array([0, 1, 0, 1, 0, 1], dtype=float),   # binary
        np.array([0.1, 0.7, -0.3, 2.2, 1.0, -0.5]),  # continuous
    ])
    ds = dataset_from(X, [1, 0, 1, 0, 1, 0], ["a"] * 6)
    spec = default_feature_spec(ds)
    kinds = [(t.kind, t.i) for t in spec.terms]
    assert ("square", 1) in kinds
    assert ("square", 0) not in kinds
