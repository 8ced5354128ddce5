"""Tabular data model: schema, CSV ingestion, sensitive attributes and intersections."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

KINDS = ("numeric", "categorical")
ROLES = ("feature", "sensitive", "target", "ignore")

# Feature categories of the credit data; custom labels are allowed.
CATEGORIES = (
    "loan",
    "financial",
    "transaction_basic",
    "transaction_category",
    "credit_bureau",
    "digital_footprint",
    "user_agent",
    "customer",
)

MISSING_LEVEL = "missing"


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    role: str
    category: str | None = None
    privileged: str | None = None
    levels: tuple[str, ...] | None = None
    # set on derived intersection columns
    parents: tuple[str, str] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise SchemaError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.role == "feature" and not self.category:
            raise SchemaError(f"feature column {self.name!r} has no category label")
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "role": self.role}
        if self.category is not None:
            out["category"] = self.category
        if self.privileged is not None:
            out["privileged"] = self.privileged
        if self.levels is not None:
            out["levels"] = list(self.levels)
        if self.parents is not None:
            out["parents"] = list(self.parents)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Column":
        try:
            name = d["name"]
        except KeyError:
            raise SchemaError(f"schema column without a name: {d!r}") from None
        privileged = d.get("privileged")
        return cls(
            name=str(name),
            kind=d.get("kind", "numeric"),
            role=d.get("role", "feature"),
            category=d.get("category"),
            privileged=None if privileged is None else str(privileged),
            levels=tuple(d["levels"]) if d.get("levels") is not None else None,
            parents=tuple(d["parents"]) if d.get("parents") is not None else None,
        )


@dataclass(frozen=True)
class Schema:
    columns: tuple[Column, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate column names: {dupes}")
        targets = [c for c in self.columns if c.role == "target"]
        if not targets:
            raise SchemaError("no target column in schema")
        if len(targets) > 1:
            raise SchemaError(f"more than one target column: {[c.name for c in targets]}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def target(self) -> str:
        return next(c.name for c in self.columns if c.role == "target")

    @property
    def features(self) -> list[str]:
        return [c.name for c in self.columns if c.role == "feature"]

    @property
    def sensitive(self) -> list[str]:
        return [c.name for c in self.columns if c.role == "sensitive"]

    @property
    def atomic_sensitive(self) -> list[str]:
        return [c.name for c in self.columns if c.role == "sensitive" and c.parents is None]

    @property
    def intersections(self) -> list[str]:
        return [c.name for c in self.columns if c.role == "sensitive" and c.parents is not None]

    def categories(self) -> dict[str, list[str]]:
        """Feature names grouped by category label, in schema order."""
        out: dict[str, list[str]] = {}
        for c in self.columns:
            if c.role == "feature":
                out.setdefault(c.category, []).append(c.name)
        return out

    def __getitem__(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def replace_column(self, col: Column) -> "Schema":
        return Schema(tuple(col if c.name == col.name else c for c in self.columns))

    def add_columns(self, cols: Iterable[Column]) -> "Schema":
        return Schema(self.columns + tuple(cols))

    def drop(self, names: Iterable[str]) -> "Schema":
        names = set(names)
        return Schema(tuple(c for c in self.columns if c.name not in names))

    def to_dict(self) -> dict:
        return {"columns": [c.to_dict() for c in self.columns]}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        if "columns" not in d:
            raise SchemaError("schema document has no 'columns' list")
        return cls(tuple(Column.from_dict(c) for c in d["columns"]))

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass(frozen=True)
class SensitiveSpec:
    """A sensitive attribute with its ordered levels and privileged level."""

    name: str
    values: tuple[str, ...]
    privileged: str
    parents: tuple[str, str] | None = None

    def __post_init__(self):
        if len(self.values) < 2:
            raise SchemaError(f"sensitive attribute {self.name!r} needs at least 2 levels")
        if self.privileged not in self.values:
            raise SchemaError(
                f"privileged level {self.privileged!r} not among levels of {self.name!r}"
            )

    @property
    def kind(self) -> str:
        return "atomic" if self.parents is None else "intersection"

    @property
    def unprivileged(self) -> list[str]:
        return [v for v in self.values if v != self.privileged]


@dataclass(frozen=True)
class Dataset:
    """Schema plus a frame of rows.

    Numeric cells are float64 with NaN as the missing sentinel; categorical cells
    are strings with None as missing. Treat instances as read-only: every operation
    in this package returns a new Dataset.
    """

    schema: Schema
    frame: pd.DataFrame = field(repr=False)

    def __post_init__(self):
        missing = [n for n in self.schema.names if n not in self.frame.columns]
        if missing:
            raise DataError(f"frame lacks schema columns {missing}")
        y = self.frame[self.schema.target]
        if y.isna().any():
            raise DataError("target column has missing values")

    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def y(self) -> np.ndarray:
        return self.frame[self.schema.target].to_numpy(dtype=np.int64)

    def __len__(self) -> int:
        return self.n

    def take(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        return Dataset(self.schema, self.frame.iloc[np.asarray(idx)].reset_index(drop=True))

    def levels(self, name: str) -> list[str]:
        """Observed non-missing levels of a categorical column (declared order first)."""
        col = self.schema[name]
        observed = set(self.frame[name].dropna().unique())
        if col.levels is not None:
            ordered = [v for v in col.levels if v in observed]
            return ordered + sorted(observed - set(ordered))
        return sorted(observed)

    def sensitive_spec(self, name: str) -> SensitiveSpec:
        col = self.schema[name]
        if col.role != "sensitive":
            raise SchemaError(f"{name!r} is not a sensitive column")
        if col.privileged is None:
            raise SchemaError(f"sensitive column {name!r} declares no privileged level")
        return SensitiveSpec(name, tuple(self.levels(name)), col.privileged, col.parents)

    def privileged_indicator(self, name: str) -> np.ndarray:
        """1 for rows in the privileged level of `name`, 0 otherwise."""
        col = self.schema[name]
        return (self.frame[name] == col.privileged).to_numpy(dtype=np.int64)


def _parse_numeric(raw: pd.Series, name: str) -> pd.Series:
    values = pd.to_numeric(raw.where(raw != ""), errors="coerce")
    bad = values.isna() & (raw != "")
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
        raise DataError(
            f"row {row}, column {name!r}: cannot parse {raw.iloc[row - 1]!r} as a number"
        )
    return values.astype(np.float64)


def load_csv(path: str | Path, schema: Schema) -> Dataset:
    """Read a UTF-8 CSV with a header row, parsing each column per the schema.

    Row numbers in error messages count data rows from 1 (the header is row 0).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        records = [r for r in reader if r]
    header = [h.strip() for h in header]
    unknown = [h for h in header if h not in schema]
    if unknown:
        raise DataError(f"unknown column(s) {unknown} not declared in schema")
    if schema.target not in header:
        raise DataError(f"no target: column {schema.target!r} missing from {path}")
    absent = [n for n in schema.names if n not in header]
    if absent:
        raise DataError(f"missing column(s) {absent} declared in schema")
    for i, r in enumerate(records, start=1):
        if len(r) != len(header):
            raise DataError(f"row {i}: expected {len(header)} fields, got {len(r)}")

    raw = pd.DataFrame(records, columns=header, dtype=object) if records else pd.DataFrame(
        {h: pd.Series([], dtype=object) for h in header}
    )
    out = {}
    for col in schema.columns:
        series = raw[col.name].astype(str).str.strip()
        if col.role == "target":
            values = _parse_numeric(series, col.name)
            if values.isna().any():
                row = int(np.flatnonzero(values.isna().to_numpy())[0]) + 1
                raise DataError(f"row {row}: target {col.name!r} is missing")
            if not values.isin([0.0, 1.0]).all():
                row = int(np.flatnonzero(~values.isin([0.0, 1.0]).to_numpy())[0]) + 1
                raise DataError(f"row {row}: target {col.name!r} must be 0 or 1")
            out[col.name] = values.astype(np.int64)
        elif col.kind == "numeric":
            out[col.name] = _parse_numeric(series, col.name)
        else:
            values = series.where(series != "", None).astype(object)
            if col.levels is not None:
                bad = values.notna() & ~values.isin(col.levels)
                if bad.any():
                    row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
                    raise DataError(
                        f"row {row}, column {col.name!r}: {values.iloc[row - 1]!r} "
                        f"is not a declared level"
                    )
            out[col.name] = values
    frame = pd.DataFrame(out, columns=schema.names)
    return Dataset(schema, frame)


def save_csv(ds: Dataset, path: str | Path) -> None:
    frame = ds.frame[ds.schema.names]
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


@dataclass(frozen=True)
class SensitiveRules:
    """Discretization rules for the raw sensitive attributes.

    Set a column name to None to skip that rule.
    """

    age_column: str | None = "age"
    age_threshold: float = 25
    young: str = "young"
    aged: str = "aged"
    children_column: str | None = "children"
    # upper bounds (inclusive) of the buckets below the open-ended last one
    children_bins: tuple[tuple[str, int], ...] = (("none", 0), ("1-2", 2))
    children_top: str = "3+"
    status_column: str | None = "status"
    drop_status: tuple[str, ...] = ("widowed",)

    @property
    def children_levels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.children_bins) + (self.children_top,)

    @classmethod
    def for_schema(cls, schema: Schema, **overrides) -> "SensitiveRules":
        """Standard rules restricted to the columns the schema actually has."""
        rules = cls(**overrides)
        return replace(
            rules,
            age_column=rules.age_column if rules.age_column in schema else None,
            children_column=rules.children_column if rules.children_column in schema else None,
            status_column=rules.status_column if rules.status_column in schema else None,
        )


def _bucket_children(v: float, rules: SensitiveRules):
    if v is None or np.isnan(v):
        return None
    for label, upper in rules.children_bins:
        if v <= upper:
            return label
    return rules.children_top


def discretize_sensitive(ds: Dataset, rules: SensitiveRules | None = None) -> Dataset:
    """Bucket age and number of children, and drop rows with an excluded status.

    Already-categorical age/children columns are left alone, so the operation is
    idempotent.
    """
    rules = rules or SensitiveRules()
    for name in (rules.age_column, rules.children_column, rules.status_column):
        if name is not None and name not in ds.schema:
            raise SchemaError(f"discretization rule references missing column {name!r}")
    frame = ds.frame.copy()
    schema = ds.schema

    if rules.status_column is not None:
        col = schema[rules.status_column]
        status = frame[rules.status_column]
        dropped = status.astype(str).str.lower().isin([s.lower() for s in rules.drop_status])
        if dropped.any():
            logger.info("dropping %d rows with status in %s", int(dropped.sum()), rules.drop_status)
            frame = frame.loc[~dropped].reset_index(drop=True)
        if col.levels is not None:
            keep = tuple(v for v in col.levels if v.lower() not in {s.lower() for s in rules.drop_status})
            schema = schema.replace_column(replace(col, levels=keep))

    if rules.age_column is not None and schema[rules.age_column].kind == "numeric":
        col = schema[rules.age_column]
        age = frame[rules.age_column]
        frame[rules.age_column] = np.where(
            age.isna(), None, np.where(age >= rules.age_threshold, rules.aged, rules.young)
        ).astype(object)
        levels = (rules.young, rules.aged)
        privileged = col.privileged if col.privileged in levels else rules.aged
        schema = schema.replace_column(
            replace(col, kind="categorical", levels=levels, privileged=privileged)
        )

    if rules.children_column is not None and schema[rules.children_column].kind == "numeric":
        col = schema[rules.children_column]
        frame[rules.children_column] = pd.Series(
            [_bucket_children(v, rules) for v in frame[rules.children_column]], dtype=object
        )
        levels = rules.children_levels
        privileged = col.privileged if col.privileged in levels else levels[0]
        schema = schema.replace_column(
            replace(col, kind="categorical", levels=levels, privileged=privileged)
        )
    return Dataset(schema, frame)


def intersection_name(a: str, b: str) -> str:
    return f"{a}-{b}"


def derive_intersections(ds: Dataset, pairs: Iterable[tuple[str, str]] | None = None) -> Dataset:
    """Add one categorical sensitive column per attribute pair, valued "a-b".

    Only observed combinations become levels. With `pairs=None` every unordered
    pair of atomic sensitive attributes is used, in schema order.
    """
    if pairs is None:
        pairs = list(itertools.combinations(ds.schema.atomic_sensitive, 2))
    frame = ds.frame.copy()
    new_cols = []
    taken = set(ds.schema.names)
    for a, b in pairs:
        for name in (a, b):
            if name not in ds.schema:
                raise SchemaError(f"intersection references unknown column {name!r}")
            col = ds.schema[name]
            if col.role != "sensitive" or col.parents is not None:
                raise SchemaError(f"{name!r} is not an atomic sensitive attribute")
            if col.kind != "categorical":
                raise SchemaError(f"{name!r} must be discretized before intersecting")
        name = intersection_name(a, b)
        if name in taken:
            raise SchemaError(f"duplicate derived column {name!r}")
        taken.add(name)
        va, vb = frame[a], frame[b]
        joined = va.astype(str) + "-" + vb.astype(str)
        frame[name] = joined.where(va.notna() & vb.notna(), None).astype(object)
        order = [
            f"{x}-{y}" for x in ds.levels(a) for y in ds.levels(b)
        ]
        observed = set(frame[name].dropna().unique())
        levels = tuple(v for v in order if v in observed)
        pa, pb = ds.schema[a].privileged, ds.schema[b].privileged
        privileged = None if pa is None or pb is None else f"{pa}-{pb}"
        new_cols.append(
            Column(name, "categorical", "sensitive", privileged=privileged, levels=levels, parents=(a, b))
        )
    return Dataset(ds.schema.add_columns(new_cols), frame)


@dataclass(frozen=True)
class LevelStats:
    attribute: str
    level: str
    count: int
    share: float
    repayment: float


@dataclass(frozen=True)
class DescriptiveStats:
    n: int
    repayment: float
    rows: tuple[LevelStats, ...]

    def for_attribute(self, name: str) -> list[LevelStats]:
        return [r for r in self.rows if r.attribute == name]

    def get(self, attribute: str, level: str) -> LevelStats:
        for r in self.rows:
            if r.attribute == attribute and r.level == level:
                return r
        raise KeyError((attribute, level))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.attribute, r.level, r.count, r.share, r.repayment) for r in self.rows],
            columns=["attribute", "level", "count", "share", "repayment"],
        )


def describe(ds: Dataset) -> DescriptiveStats:
    """Count, population share and repayment rate per sensitive level and intersection level."""
    y = ds.frame[ds.schema.target]
    rows = []
    for name in ds.schema.sensitive:
        values = ds.frame[name]
        present = values.notna()
        total = int(present.sum())
        for level in ds.levels(name):
            mask = values == level
            count = int(mask.sum())
            rows.append(
                LevelStats(name, level, count, count / total, float(y[mask].mean()))
            )
    overall = float(y.mean()) if ds.n else float("nan")
    return DescriptiveStats(ds.n, overall, tuple(rows))
