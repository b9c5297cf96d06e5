"""Clustered observational dataset: container, validation, CSV ingestion/export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, RowError, SchemaError
from .validation import check_covariates, check_groups, check_outcome, check_treatment

FILTER_MODES = ("keep-all", "drop-no-treated", "drop-no-control", "drop-both")

# 17 significant digits round-trips IEEE doubles exactly.
_FMT = "{:.17g}"


@dataclass(frozen=True)
class Unit:
    """One observation: identifiers, binary treatment, outcome, raw covariates."""

    unit_id: str
    cluster_id: str
    treatment: int
    outcome: float | None
    covariates: tuple[float, ...]


@dataclass(frozen=True)
class ColumnSchema:
    """Column-name bindings for CSV ingestion.

    ``unit_id`` is optional; when absent, row numbers become unit ids.
    """

    treatment: str
    outcome: str
    cluster: str
    covariates: tuple[str, ...]
    unit_id: str | None = None

    def __post_init__(self):
        if len(self.covariates) == 0:
            raise SchemaError("schema must name at least one covariate column")
        names = [self.treatment, self.outcome, self.cluster, *self.covariates]
        if self.unit_id is not None:
            names.append(self.unit_id)
        if len(set(names)) != len(names):
            raise SchemaError("schema binds the same column to multiple roles")


class Dataset:
    """Immutable validated sample of units nested in clusters.

    Rows keep their input order. Cluster ids are opaque strings; the dense
    integer codes used internally never appear in outputs.
    """

    def __init__(self, X, z, cluster_ids, y=None, unit_ids=None, covariate_names=None):
        X = check_covariates(X)
        n = X.shape[0]
        z = check_treatment(z, n)
        y = check_outcome(y, n)
        labels = check_groups(cluster_ids, n)

        if unit_ids is None:
            unit_ids = [str(i + 1) for i in range(n)]
        else:
            unit_ids = [str(u) for u in unit_ids]
            if len(unit_ids) != n:
                raise DatasetError("unit_ids length does not match data")
        if covariate_names is None:
            covariate_names = [f"x{j + 1}" for j in range(X.shape[1])]
        else:
            covariate_names = [str(c) for c in covariate_names]
            if len(covariate_names) != X.shape[1]:
                raise DatasetError("covariate_names length does not match data")

        clusters: list[str] = []
        seen: dict[str, int] = {}
        codes = np.empty(n, dtype=np.int64)
        for i, lab in enumerate(labels):
            if lab not in seen:
                seen[lab] = len(clusters)
                clusters.append(lab)
            codes[i] = seen[lab]

        self.X = X
        self.z = z
        self.y = y
        self.unit_ids = unit_ids
        self.cluster_labels = labels
        self.clusters = clusters
        self.cluster_codes = codes
        self.covariate_names = covariate_names

        K = len(clusters)
        self.n = n
        self.n1 = int(z.sum())
        self.n0 = n - self.n1
        self.n_g = np.bincount(codes, minlength=K)
        self.n1_g = np.bincount(codes, weights=z, minlength=K).astype(np.int64)
        self.n0_g = self.n_g - self.n1_g
        self.cluster_index = {
            lab: np.flatnonzero(codes == k) for k, lab in enumerate(clusters)
        }

        self._check_counts()
        for arr in (self.X, self.z, self.cluster_codes, self.n_g, self.n1_g, self.n0_g):
            arr.setflags(write=False)
        if self.y is not None:
            self.y.setflags(write=False)

    def _check_counts(self):
        if self.n != self.n1 + self.n0:
            raise DatasetError("treated/control counts do not sum to n")
        if int(self.n1_g.sum()) != self.n1 or int(self.n0_g.sum()) != self.n0:
            raise DatasetError("per-cluster counts do not sum to totals")
        sizes = sum(len(v) for v in self.cluster_index.values())
        if sizes != self.n:
            raise DatasetError("cluster index does not partition the units")

    @property
    def n_clusters(self):
        return len(self.clusters)

    @property
    def n_covariates(self):
        return self.X.shape[1]

    def __len__(self):
        return self.n

    def unit(self, i):
        """Materialize row ``i`` as a Unit record."""
        return Unit(
            unit_id=self.unit_ids[i],
            cluster_id=self.cluster_labels[i],
            treatment=int(self.z[i]),
            outcome=None if self.y is None else float(self.y[i]),
            covariates=tuple(float(v) for v in self.X[i]),
        )

    def iter_units(self):
        return (self.unit(i) for i in range(self.n))

    def subset(self, positions):
        """New Dataset restricted to the given row positions (order preserved)."""
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(
            self.X[positions],
            self.z[positions],
            [self.cluster_labels[i] for i in positions],
            y=None if self.y is None else self.y[positions],
            unit_ids=[self.unit_ids[i] for i in positions],
            covariate_names=self.covariate_names,
        )

    def require_outcome(self):
        if self.y is None:
            raise DatasetError("this operation requires outcomes, but none were provided")
        return self.y


@dataclass(frozen=True)
class ClusterFilterReport:
    """Result of dropping degenerate clusters: what was removed and what remains."""

    dropped_clusters: tuple[tuple[str, str], ...]  # (cluster_id, reason)
    dropped_unit_count: int
    retained: Dataset
    estimand_changed: bool


def filter_degenerate_clusters(ds, mode="drop-both"):
    """Remove clusters lacking an arm, per ``mode``.

    Reasons are "no-treated" / "no-control". Raises DatasetError if the filter
    would remove every treated unit (the estimand would be undefined).
    Idempotent for every mode.
    """
    if mode not in FILTER_MODES:
        raise DatasetError(f"unknown filter mode {mode!r}; expected one of {FILTER_MODES}")

    dropped: list[tuple[str, str]] = []
    keep_codes = np.ones(ds.n_clusters, dtype=bool)
    for k, lab in enumerate(ds.clusters):
        no_treated = ds.n1_g[k] == 0
        no_control = ds.n0_g[k] == 0
        if no_treated and mode in ("drop-no-treated", "drop-both"):
            dropped.append((lab, "no-treated"))
            keep_codes[k] = False
        elif no_control and mode in ("drop-no-control", "drop-both"):
            dropped.append((lab, "no-control"))
            keep_codes[k] = False

    if not dropped:
        return ClusterFilterReport((), 0, ds, False)

    keep_rows = np.flatnonzero(keep_codes[ds.cluster_codes])
    if ds.z[keep_rows].sum() == 0:
        raise DatasetError(
            "filtering removed every treated unit; the estimand is undefined"
        )
    retained = ds.subset(keep_rows)
    return ClusterFilterReport(
        tuple(dropped), ds.n - retained.n, retained, True
    )


def _parse_value(text, row, column):
    text = text.strip()
    if text == "":
        raise RowError(row, f"missing value in column {column!r}")
    try:
        value = float(text)
    except ValueError:
        raise RowError(row, f"non-numeric value {text!r} in column {column!r}") from None
    if not math.isfinite(value):
        raise RowError(row, f"non-finite value {text!r} in column {column!r}")
    return value


def load_csv(path, schema):
    """Read a dataset from an RFC-4180-style CSV with a header row.

    Columns are bound by name through ``schema``. Data rows are numbered from 1
    in error messages. Missing values are rejected outright.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: file is empty, header row required") from None
        header = [h.strip() for h in header]
        positions = {}
        wanted = [schema.treatment, schema.outcome, schema.cluster, *schema.covariates]
        if schema.unit_id is not None:
            wanted.append(schema.unit_id)
        for name in wanted:
            if name not in header:
                raise SchemaError(f"missing column {name!r} (header has {header})")
            positions[name] = header.index(name)

        X_rows, z_rows, y_rows, cluster_rows, id_rows = [], [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            if len(row) == 0:
                continue
            if len(row) != len(header):
                raise RowError(row_no, f"expected {len(header)} fields, got {len(row)}")
            zval = _parse_value(row[positions[schema.treatment]], row_no, schema.treatment)
            if zval not in (0.0, 1.0):
                raise RowError(
                    row_no,
                    f"non-binary treatment value {row[positions[schema.treatment]].strip()!r}",
                )
            z_rows.append(int(zval))
            y_rows.append(_parse_value(row[positions[schema.outcome]], row_no, schema.outcome))
            cluster_rows.append(row[positions[schema.cluster]].strip())
            X_rows.append(
                [_parse_value(row[positions[c]], row_no, c) for c in schema.covariates]
            )
            if schema.unit_id is not None:
                id_rows.append(row[positions[schema.unit_id]].strip())

    if not X_rows:
        raise DatasetError(f"{path}: no data rows")
    return Dataset(
        np.asarray(X_rows, dtype=float),
        np.asarray(z_rows),
        cluster_rows,
        y=np.asarray(y_rows, dtype=float),
        unit_ids=id_rows if schema.unit_id is not None else None,
        covariate_names=list(schema.covariates),
    )


def write_csv(ds, path, cluster_column="cluster"):
    """Write the dataset at full precision so load_csv round-trips exactly."""
    ds.require_outcome()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_id", cluster_column, "treatment", "outcome", *ds.covariate_names])
        for i in range(ds.n):
            writer.writerow(
                [
                    ds.unit_ids[i],
                    ds.cluster_labels[i],
                    str(int(ds.z[i])),
                    _FMT.format(ds.y[i]),
                    *(_FMT.format(v) for v in ds.X[i]),
                ]
            )


def default_schema(ds, cluster_column="cluster"):
    """Schema matching write_csv output for the given dataset."""
    return ColumnSchema(
        treatment="treatment",
        outcome="outcome",
        cluster=cluster_column,
        covariates=tuple(ds.covariate_names),
        unit_id="unit_id",
    )
