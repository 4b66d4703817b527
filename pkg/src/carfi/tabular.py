"""Column-typed tabular data: schemas, CSV ingestion, splitting, permutation.

Continuous cells are 64-bit floats, categorical cells are dense level
indices (stored as floats in the value matrix; the schema keeps the
labels). Datasets are immutable after construction and all randomized
operations are pure functions of (inputs, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FeatureKind",
    "CONTINUOUS",
    "categorical",
    "Schema",
    "Dataset",
    "Evidence",
    "read_csv",
    "write_csv",
    "read_schema_file",
    "split",
    "permute_column",
    "features_only",
]


@dataclass(frozen=True)
class FeatureKind:
    """Column type: continuous when ``levels`` is None, else categorical."""

    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.levels is not None:
            if len(self.levels) == 0:
                raise ValueError("categorical feature needs at least one level")
            if len(set(self.levels)) != len(self.levels):
                raise ValueError("categorical levels must be distinct")

    @property
    def is_categorical(self) -> bool:
        return self.levels is not None

    @property
    def n_levels(self) -> int:
        return 0 if self.levels is None else len(self.levels)


CONTINUOUS = FeatureKind()


def categorical(*levels: str) -> FeatureKind:
    return FeatureKind(levels=tuple(levels))


@dataclass(frozen=True)
class Schema:
    """Ordered named columns plus an optional target column."""

    columns: tuple[tuple[str, FeatureKind], ...]
    target: str | None = None

    def __post_init__(self):
        names = [name for name, _ in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("column names must be unique")
        if self.target is not None and self.target not in names:
            raise ValueError(f"target {self.target!r} is not a column")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.columns)

    @property
    def kinds(self) -> tuple[FeatureKind, ...]:
        return tuple(kind for _, kind in self.columns)

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    def index(self, name: str) -> int:
        for i, (n, _) in enumerate(self.columns):
            if n == name:
                return i
        raise ValueError(f"unknown column {name!r}")

    @property
    def target_index(self) -> int | None:
        return None if self.target is None else self.index(self.target)

    @property
    def feature_indices(self) -> tuple[int, ...]:
        """Column indices of all non-target columns, in schema order."""
        ti = self.target_index
        return tuple(i for i in range(self.n_columns) if i != ti)

    def kind(self, j: int) -> FeatureKind:
        return self.columns[j][1]

    def validate_cell(self, j: int, value: float) -> None:
        kind = self.kind(j)
        if not np.isfinite(value):
            raise ValueError(f"non-finite value in column {self.columns[j][0]!r}")
        if kind.is_categorical:
            if value != int(value) or not 0 <= int(value) < kind.n_levels:
                raise ValueError(
                    f"level index {value} out of range for column {self.columns[j][0]!r}"
                )


@dataclass(frozen=True)
class Dataset:
    """Immutable (n_rows x n_columns) table of floats under a Schema."""

    schema: Schema
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("values must be a 2-d array")
        if vals.shape[0] < 1:
            raise ValueError("no rows")
        if vals.shape[1] != self.schema.n_columns:
            raise ValueError(
                f"row width {vals.shape[1]} != schema width {self.schema.n_columns}"
            )
        if not np.isfinite(vals).all():
            raise ValueError("non-finite cell values are not allowed")
        for j, (name, kind) in enumerate(self.schema.columns):
            if kind.is_categorical:
                col = vals[:, j]
                if ((col != np.floor(col)) | (col < 0) | (col >= kind.n_levels)).any():
                    raise ValueError(f"invalid level index in column {name!r}")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def column(self, name_or_index) -> np.ndarray:
        j = name_or_index if isinstance(name_or_index, int) else self.schema.index(name_or_index)
        return self.values[:, j]

    def take_rows(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.schema, self.values[np.asarray(idx)])

    def feature_matrix(self) -> np.ndarray:
        """Values of all non-target columns, in schema order."""
        return self.values[:, list(self.schema.feature_indices)]


@dataclass(frozen=True)
class Evidence:
    """Partial feature assignment: column index -> fixed cell value.

    May be empty, which corresponds to the marginal (no conditioning) case.
    """

    assignments: dict[int, float]

    def validate(self, schema: Schema) -> None:
        for j, v in self.assignments.items():
            if not 0 <= j < schema.n_columns:
                raise ValueError(f"evidence column index {j} out of range")
            schema.validate_cell(j, v)

    @property
    def columns(self) -> tuple[int, ...]:
        return tuple(sorted(self.assignments))

    def merged_with(self, other: "Evidence") -> "Evidence":
        overlap = set(self.assignments) & set(other.assignments)
        if overlap:
            raise ValueError(f"evidence sets overlap on columns {sorted(overlap)}")
        combined = dict(self.assignments)
        combined.update(other.assignments)
        return Evidence(combined)


def _infer_kinds(header, rows):
    kinds = []
    for j in range(len(header)):
        cells = [r[j] for r in rows]
        numeric = True
        for c in cells:
            try:
                float(c)
            except ValueError:
                numeric = False
                break
        if numeric:
            kinds.append(CONTINUOUS)
        else:
            levels = []
            seen = set()
            for c in cells:
                if c not in seen:
                    seen.add(c)
                    levels.append(c)
            kinds.append(FeatureKind(levels=tuple(levels)))
    return kinds


def read_csv(path, schema_hint: Schema | None = None) -> Dataset:
    """Read a comma-separated, headered, UTF-8 file into a Dataset.

    Without a schema hint, columns whose cells all parse as numbers become
    continuous; everything else becomes categorical with levels in first
    appearance order. Missing and non-finite cells are rejected.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty file: no header row") from None
        rows = list(reader)
    if not rows:
        raise ValueError("no rows")
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise ValueError(f"ragged row {i + 1}: {len(r)} cells, expected {len(header)}")
        for j, c in enumerate(r):
            if c == "":
                raise ValueError(f"missing value at row {i + 1}, column {header[j]!r}")

    if schema_hint is not None:
        if schema_hint.names != tuple(header):
            raise ValueError(
                f"schema hint columns {schema_hint.names} do not match header {tuple(header)}"
            )
        schema = schema_hint
    else:
        schema = Schema(columns=tuple(zip(header, _infer_kinds(header, rows))))

    values = np.empty((len(rows), len(header)), dtype=np.float64)
    for j, (name, kind) in enumerate(schema.columns):
        if kind.is_categorical:
            lookup = {lab: i for i, lab in enumerate(kind.levels)}
            for i, r in enumerate(rows):
                try:
                    values[i, j] = lookup[r[j]]
                except KeyError:
                    raise ValueError(
                        f"unknown level {r[j]!r} in column {name!r} at row {i + 1}"
                    ) from None
        else:
            for i, r in enumerate(rows):
                try:
                    v = float(r[j])
                except ValueError:
                    raise ValueError(
                        f"unparseable numeric cell {r[j]!r} in column {name!r} at row {i + 1}"
                    ) from None
                if not np.isfinite(v):
                    raise ValueError(f"non-finite value in column {name!r} at row {i + 1}")
                values[i, j] = v
    return Dataset(schema, values)


def write_csv(data: Dataset, path) -> None:
    """Write a Dataset as CSV; floats use shortest round-trip formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(data.schema.names)
        kinds = data.schema.kinds
        for row in data.values:
            out = []
            for j, v in enumerate(row):
                if kinds[j].is_categorical:
                    out.append(kinds[j].levels[int(v)])
                else:
                    out.append(repr(float(v)))
            writer.writerow(out)


def read_schema_file(path) -> Schema:
    """Parse a schema file: one line per column, ``name:kind[:lv1|lv2|...]``."""
    columns = []
    target = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(":")
            if len(parts) < 2:
                raise ValueError(f"schema line {lineno}: expected name:kind")
            name, kind = parts[0], parts[1].lower()
            if kind == "continuous":
                columns.append((name, CONTINUOUS))
            elif kind == "categorical":
                if len(parts) < 3 or not parts[2]:
                    raise ValueError(f"schema line {lineno}: categorical needs levels")
                columns.append((name, FeatureKind(levels=tuple(parts[2].split("|")))))
            elif kind == "target":
                # convenience marker: 'name:target:continuous' etc.
                target = name
                sub = parts[2].lower() if len(parts) > 2 else "continuous"
                if sub == "continuous":
                    columns.append((name, CONTINUOUS))
                else:
                    columns.append((name, FeatureKind(levels=tuple(parts[3].split("|")))))
            else:
                raise ValueError(f"schema line {lineno}: unknown kind {kind!r}")
    return Schema(columns=tuple(columns), target=target)


def split(data: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint row partition into (train, test).

    Train size is round(f*N) (half-up); original row order is preserved
    within each side. Deterministic for a fixed seed.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = data.n_rows
    if n < 2:
        raise ValueError("need at least 2 rows to split")
    n_train = int(np.floor(train_fraction * n + 0.5))
    if n_train == 0 or n_train == n:
        raise ValueError("split would leave an empty side")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return data.take_rows(train_idx), data.take_rows(test_idx)


def permute_column(data: Dataset, j: int, seed: int) -> Dataset:
    """Replace column j by a uniformly random permutation of its values."""
    if not 0 <= j < data.n_columns:
        raise ValueError(f"column index {j} out of range")
    rng = np.random.default_rng(seed)
    values = data.values.copy()
    values[:, j] = values[rng.permutation(data.n_rows), j]
    return Dataset(data.schema, values)


def features_only(data: Dataset) -> Dataset:
    """Drop the target column (if any) from schema and values."""
    if data.schema.target is None:
        return data
    keep = list(data.schema.feature_indices)
    schema = Schema(columns=tuple(data.schema.columns[i] for i in keep), target=None)
    return Dataset(schema, data.values[:, keep])
