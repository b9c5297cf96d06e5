import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from clusterbal.data import Dataset


@pytest.fixture
def toy_dataset():
    """Two clusters, both arms in each, 2 covariates, fixed outcomes."""
    rng = np.random.default_rng(7)
    X = rng.normal(size=(16, 2))
    z = np.tile([1, 0, 0, 1], 4)
    groups = ["a"] * 8 + ["b"] * 8
    y = rng.normal(size=16)
    return Dataset(X, z, groups, y=y)


def make_random_dataset(rng, n_clusters=4, units=8, n_cov=2, ensure_both_arms=True):
    n = n_clusters * units
    X = rng.normal(size=(n, n_cov))
    groups = [f"c{k}" for k in range(n_clusters) for _ in range(units)]
    while True:
        z = (rng.uniform(size=n) < 0.45).astype(int)
        if not ensure_both_arms:
            if 0 < z.sum() < n:
                break
            continue
        zm = z.reshape(n_clusters, units)
        if np.all(zm.sum(axis=1) >= 1) and np.all(zm.sum(axis=1) <= units - 1):
            break
    y = rng.normal(size=n) + X @ rng.normal(size=n_cov)
    return Dataset(X, z, groups, y=y)
