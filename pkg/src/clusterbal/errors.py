"""Exception types raised across the package."""


class ClusterbalError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(ClusterbalError):
    """A required column is missing or the column bindings are invalid."""


class RowError(ClusterbalError):
    """A data row failed validation; carries the 1-based data row number."""

    def __init__(self, row, message):
        self.row = row
        super().__init__(f"row {row}: {message}")


class DatasetError(ClusterbalError):
    """Dataset-level invariant violation (counts, arms, cluster structure)."""


class FeatureError(ClusterbalError):
    """Invalid feature specification or mismatched feature blocks."""


class SolverInputError(ClusterbalError):
    """Quadratic program inputs are malformed (non-finite values, bad shapes)."""


class InfeasibleBalanceError(ClusterbalError):
    """Exact balance constraints admit no nonnegative solution.

    ``violations`` holds the per-constraint residual of the least-squares
    certificate, in the same row order as the constraints that were posed.
    """

    def __init__(self, message, violations=None):
        self.violations = violations
        super().__init__(message)


class SeparationError(ClusterbalError):
    """Logistic fit diverged, indicating (near) complete separation."""


class EstimationError(ClusterbalError):
    """An estimator's preconditions do not hold for the given data."""


class ConfigError(ClusterbalError):
    """CLI configuration file is invalid; message names the offending field."""
