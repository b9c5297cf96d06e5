"""Input validation helpers shared by the estimator API and data layer."""

import numpy as np

from .errors import DatasetError


def check_covariates(X):
    """Coerce to a finite 2-d float array of shape (n, c)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise DatasetError(f"covariates must be 2-dimensional, got ndim={X.ndim}")
    if X.shape[0] == 0:
        raise DatasetError("covariate matrix has no rows")
    if not np.all(np.isfinite(X)):
        raise DatasetError("covariates contain non-finite values")
    return X


def check_treatment(z, n):
    """Coerce to an int8 vector of 0/1 of length n with both arms present."""
    z = np.asarray(z)
    if z.shape != (n,):
        raise DatasetError(f"treatment must have shape ({n},), got {z.shape}")
    zf = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(zf)) or not np.all((zf == 0) | (zf == 1)):
        bad = np.flatnonzero(~((zf == 0) | (zf == 1)))
        raise DatasetError(
            f"treatment must be binary 0/1; first bad entry at position {bad[0]}"
        )
    z = zf.astype(np.int8)
    if z.sum() == 0:
        raise DatasetError("no treated units in the data")
    if z.sum() == n:
        raise DatasetError("no control units in the data")
    return z


def check_outcome(y, n):
    """Coerce to a finite float vector of length n, or pass None through."""
    if y is None:
        return None
    y = np.asarray(y, dtype=float)
    if y.shape != (n,):
        raise DatasetError(f"outcome must have shape ({n},), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise DatasetError("outcome contains non-finite values")
    return y


def check_groups(groups, n):
    """Return per-unit cluster labels as strings; None means one pooled cluster."""
    if groups is None:
        return ["__all__"] * n
    if np.ndim(groups) != 1 or len(groups) != n:
        raise DatasetError(f"groups must be 1-dimensional of length {n}")
    return [str(g) for g in groups]
