"""Feature preparation: imputation, correlation filter, per-category importance reduction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from ._seeds import derive_seed
from .learner import FeatureEncoder, forest_importance
from .tabular import MISSING_LEVEL, Column, Dataset

logger = logging.getLogger(__name__)

MISSING_SUFFIX = "__missing"


class PrepError(ValueError):
    pass


@dataclass
class ReductionTrace:
    removed_by_correlation: list[tuple[str, str, float]] = field(default_factory=list)
    removed_by_importance: list[tuple[str, str, float]] = field(default_factory=list)
    retained: list[str] = field(default_factory=list)
    zero_variance: list[str] = field(default_factory=list)

    @property
    def removed(self) -> list[str]:
        return [r for _, r, _ in self.removed_by_correlation] + [c for c, _, _ in self.removed_by_importance]

    def to_dict(self) -> dict:
        return {
            "removed_by_correlation": [
                {"kept": k, "removed": r, "abs_r": v} for k, r, v in self.removed_by_correlation
            ],
            "removed_by_importance": [
                {"column": c, "category": cat, "importance": v} for c, cat, v in self.removed_by_importance
            ],
            "retained": list(self.retained),
            "zero_variance": list(self.zero_variance),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def impute(ds: Dataset) -> Dataset:
    """Fill missing feature cells.

    Numeric: column median of observed values, plus a 0/1 `<name>__missing` indicator
    column in the same category. Categorical: a dedicated "missing" level.
    """
    frame = ds.frame.copy()
    schema = ds.schema
    added = []
    for name in ds.schema.features:
        col = ds.schema[name]
        values = frame[name]
        miss = values.isna()
        if not miss.any():
            continue
        if col.kind == "numeric":
            if miss.all():
                raise PrepError(f"column {name!r} is entirely missing; cannot compute a median")
            frame[name] = values.fillna(float(np.median(values[~miss])))
            indicator = name + MISSING_SUFFIX
            if indicator in schema:
                raise PrepError(f"indicator column {indicator!r} already exists")
            frame[indicator] = miss.astype(np.float64)
            added.append(Column(indicator, "numeric", "feature", category=col.category))
        else:
            frame[name] = values.where(~miss, MISSING_LEVEL)
            if col.levels is not None and MISSING_LEVEL not in col.levels:
                schema = schema.replace_column(replace(col, levels=col.levels + (MISSING_LEVEL,)))
    return Dataset(schema.add_columns(added), frame)


def _abs_corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    return float(abs(a @ b) / np.sqrt((a @ a) * (b @ b)))


def correlation_filter(ds: Dataset, threshold: float = 0.7) -> tuple[Dataset, ReductionTrace]:
    """Greedy pairwise scan in schema order; of a pair with |r| > threshold the later one goes.

    Only numeric features are scanned. Constant columns have no defined correlation:
    they are kept and listed under `zero_variance`.
    """
    trace = ReductionTrace()
    numeric = [n for n in ds.schema.features if ds.schema[n].kind == "numeric"]
    X = ds.frame[numeric].to_numpy(dtype=np.float64)
    if np.isnan(X).any():
        raise PrepError("impute missing values before the correlation filter")
    std = X.std(axis=0) if X.shape[0] else np.zeros(len(numeric))
    constant = std == 0
    trace.zero_variance = [n for n, c in zip(numeric, constant) if c]
    removed = set()
    for i, a in enumerate(numeric):
        if a in removed or constant[i]:
            continue
        for j in range(i + 1, len(numeric)):
            b = numeric[j]
            if b in removed or constant[j]:
                continue
            r = _abs_corr(X[:, i], X[:, j])
            if r > threshold:
                removed.add(b)
                trace.removed_by_correlation.append((a, b, r))
    trace.retained = [n for n in ds.schema.features if n not in removed]
    return _drop(ds, removed), trace


def _drop(ds: Dataset, names) -> Dataset:
    names = set(names)
    keep = [c for c in ds.frame.columns if c not in names]
    return Dataset(ds.schema.drop(names), ds.frame[keep])


def importance_reduce(
    ds: Dataset, cap: int = 30, n_trees: int = 100, seed: int = 0
) -> tuple[Dataset, ReductionTrace]:
    """Keep the `cap` most important features of every category holding more than `cap`.

    Importance comes from a random forest fit on that category's features alone, with
    a per-category seed so the outcome does not depend on processing order.
    """
    if cap < 1:
        raise PrepError("cap must be at least 1")
    trace = ReductionTrace()
    removed = set()
    y = ds.y
    for category, members in ds.schema.categories().items():
        if len(members) <= cap:
            continue
        encoder = FeatureEncoder.fit(ds, members)
        X = encoder.transform(ds)
        imp = forest_importance(X, y, n_trees, derive_seed(seed, "forest", category) % (2**31))
        # one-hot columns add back up to their source feature
        per_source = {m: 0.0 for m in members}
        for col, v in zip(encoder.columns, imp):
            per_source[col.source] += float(v)
        order = sorted(members, key=lambda m: (-per_source[m], members.index(m)))
        for m in order[cap:]:
            removed.add(m)
            trace.removed_by_importance.append((m, category, per_source[m]))
        logger.info("category %s: kept %d of %d features", category, cap, len(members))
    trace.retained = [n for n in ds.schema.features if n not in removed]
    return _drop(ds, removed), trace


def reduce_features(
    ds: Dataset, threshold: float = 0.7, cap: int = 30, n_trees: int = 100, seed: int = 0
) -> tuple[Dataset, ReductionTrace]:
    """Impute, filter correlated columns, then cap each category by importance."""
    ds = impute(ds)
    ds, corr = correlation_filter(ds, threshold)
    ds, imp = importance_reduce(ds, cap, n_trees, seed)
    return ds, ReductionTrace(
        removed_by_correlation=corr.removed_by_correlation,
        removed_by_importance=imp.removed_by_importance,
        retained=imp.retained,
        zero_variance=corr.zero_variance,
    )
