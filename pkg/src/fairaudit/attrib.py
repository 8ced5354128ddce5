"""Exact path-dependent Shapley attribution for tree ensembles and category aggregation.

The tree walk follows the polynomial-time TreeSHAP recursion (Lundberg et al.). Its
control flow depends only on the tree, not on the row, so the recursion runs once per
tree while every path quantity is a vector over rows. The background distribution is
the training cover stored in each node.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .learner import GbmModel, Tree

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Attribution:
    per_feature: np.ndarray
    base_value: float
    row_ref: int


class _Path:
    """Unique-feature path of the TreeSHAP recursion, batched over rows."""

    __slots__ = ("feature", "zero", "one", "weight")

    def __init__(self, n_rows: int, capacity: int):
        self.feature = np.full(capacity, -1, dtype=np.int64)
        self.zero = np.zeros(capacity)
        self.one = np.zeros((capacity, n_rows))
        self.weight = np.zeros((capacity, n_rows))

    def copy(self) -> "_Path":
        out = _Path.__new__(_Path)
        out.feature = self.feature.copy()
        out.zero = self.zero.copy()
        out.one = self.one.copy()
        out.weight = self.weight.copy()
        return out


def _extend(path: _Path, depth: int, zero: float, one: np.ndarray, feature: int) -> None:
    path.feature[depth] = feature
    path.zero[depth] = zero
    path.one[depth] = one
    path.weight[depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        path.weight[i + 1] += one * path.weight[i] * (i + 1) / (depth + 1)
        path.weight[i] = zero * path.weight[i] * (depth - i) / (depth + 1)


def _unwind(path: _Path, depth: int, index: int) -> None:
    one = path.one[index]
    zero = path.zero[index]
    hot = one != 0
    safe_one = np.where(hot, one, 1.0)
    next_one = path.weight[depth].copy()
    for i in range(depth - 1, -1, -1):
        tmp = path.weight[i].copy()
        w_hot = next_one * (depth + 1) / ((i + 1) * safe_one)
        w_cold = tmp * (depth + 1) / (zero * (depth - i)) if zero != 0 else np.zeros_like(tmp)
        path.weight[i] = np.where(hot, w_hot, w_cold)
        next_one = np.where(hot, tmp - path.weight[i] * zero * (depth - i) / (depth + 1), next_one)
    for i in range(index, depth):
        path.feature[i] = path.feature[i + 1]
        path.zero[i] = path.zero[i + 1]
        path.one[i] = path.one[i + 1]


def _unwound_sum(path: _Path, depth: int, index: int) -> np.ndarray:
    one = path.one[index]
    zero = path.zero[index]
    hot = one != 0
    safe_one = np.where(hot, one, 1.0)
    next_one = path.weight[depth].copy()
    total = np.zeros_like(next_one)
    for i in range(depth - 1, -1, -1):
        tmp = next_one * (depth + 1) / ((i + 1) * safe_one)
        cold = path.weight[i] / zero / ((depth - i) / (depth + 1)) if zero != 0 else 0.0
        total += np.where(hot, tmp, cold)
        next_one = np.where(hot, path.weight[i] - tmp * zero * (depth - i) / (depth + 1), next_one)
    return total


def tree_shap_matrix(tree: Tree, X: np.ndarray, phi: np.ndarray | None = None) -> np.ndarray:
    """Add one tree's Shapley values for every row of X into `phi` (rows x features)."""
    n, p = X.shape
    if phi is None:
        phi = np.zeros((n, p))
    if tree.n_nodes == 1:
        return phi
    capacity = tree.depth() + 2
    ones = np.ones(n)

    def recurse(node: int, path: _Path, depth: int, zero: float, one: np.ndarray, feature: int):
        path = path.copy()
        _extend(path, depth, zero, one, feature)
        f = tree.feature[node]
        if f < 0:
            v = tree.value[node]
            for i in range(1, depth + 1):
                w = _unwound_sum(path, depth, i)
                phi[:, path.feature[i]] += w * (path.one[i] - path.zero[i]) * v
            return
        incoming_zero, incoming_one = 1.0, ones
        hit = np.flatnonzero(path.feature[1 : depth + 1] == f)
        if hit.size:
            k = int(hit[0]) + 1
            incoming_zero, incoming_one = path.zero[k], path.one[k].copy()
            _unwind(path, depth, k)
            depth -= 1
        go_left = (X[:, f] <= tree.threshold[node]).astype(np.float64)
        cover = tree.cover[node]
        lc, rc = tree.left[node], tree.right[node]
        recurse(lc, path, depth + 1, incoming_zero * tree.cover[lc] / cover, incoming_one * go_left, f)
        recurse(rc, path, depth + 1, incoming_zero * tree.cover[rc] / cover, incoming_one * (1.0 - go_left), f)

    recurse(0, _Path(n, capacity), 0, 1.0, ones, -1)
    return phi


def expected_value(model: GbmModel) -> float:
    return model.base_score + sum(t.expected_value() for t in model.trees)


def shap_values(model: GbmModel, X: np.ndarray) -> tuple[np.ndarray, float]:
    """Shapley values (rows x encoded features) in log-odds units, plus the base value."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    n_features = len(model.feature_names)
    if X.shape[1] != n_features:
        raise ValueError(f"row has {X.shape[1]} features, model expects {n_features}")
    phi = np.zeros((X.shape[0], n_features))
    for tree in model.trees:
        tree_shap_matrix(tree, X, phi)
    return phi, expected_value(model)


def tree_shap(model: GbmModel, row, row_ref: int = 0) -> Attribution:
    """Attribution of a single row (a 1-D feature vector in encoder order)."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError("tree_shap expects a single row; use shap_values for batches")
    if np.isnan(row).any():
        missing = [model.feature_names[j] for j in np.flatnonzero(np.isnan(row))]
        raise ValueError(f"row is missing model feature(s) {missing}")
    phi, base = shap_values(model, row[None, :])
    return Attribution(phi[0], base, row_ref)


@dataclass(frozen=True)
class CategoryImportance:
    """Per category: sum and mean of member features' mean |Shapley value|."""

    per_category: dict[str, tuple[float, float]]
    per_feature: dict[str, float]

    def ranked(self, stat: str = "sum") -> list[str]:
        i = {"sum": 0, "mean": 1}[stat]
        return sorted(self.per_category, key=lambda c: (-self.per_category[c][i], c))

    def to_rows(self) -> list[tuple[str, float, float]]:
        return [(c, s, m) for c, (s, m) in sorted(self.per_category.items())]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["category", "sum", "mean"])
            for c, s, m in self.to_rows():
                w.writerow([c, repr(s), repr(m)])


def aggregate(
    attrs: Sequence[Attribution] | np.ndarray,
    feature_names: Sequence[str],
    categories: Sequence[str] | dict[str, str],
) -> CategoryImportance:
    """Feature importance = mean |contribution| over rows; grouped by category.

    `attrs` is a list of Attribution or a rows x features matrix. `categories` maps
    each feature to its category, either aligned with `feature_names` or as a dict.
    """
    if isinstance(attrs, np.ndarray):
        phi = attrs
    else:
        phi = np.vstack([a.per_feature for a in attrs]) if len(attrs) else np.zeros((0, len(feature_names)))
    if isinstance(categories, dict):
        missing = [f for f in feature_names if f not in categories]
        if missing:
            raise ValueError(f"no category for feature(s) {missing}")
        cats = [categories[f] for f in feature_names]
    else:
        cats = list(categories)
        if len(cats) != len(feature_names):
            raise ValueError("categories must align with feature names")
    importance = np.mean(np.abs(phi), axis=0) if phi.shape[0] else np.zeros(len(feature_names))
    per_feature = {f: float(v) for f, v in zip(feature_names, importance)}
    per_category: dict[str, tuple[float, float]] = {}
    for cat in dict.fromkeys(cats):
        members = [importance[j] for j, c in enumerate(cats) if c == cat]
        total = float(np.sum(members))
        per_category[cat] = (total, total / len(members))
    return CategoryImportance(per_category, per_feature)


def explain_sample(model: GbmModel, X: np.ndarray, sample_size: int = 2000, seed: int = 0) -> CategoryImportance:
    """Category importance over a seeded row sample (clamped to the available rows)."""
    n = X.shape[0]
    if sample_size > n:
        logger.warning("sample size %d exceeds %d rows; using all rows", sample_size, n)
        sample_size = n
    rows = np.sort(np.random.default_rng(seed).choice(n, size=sample_size, replace=False))
    phi, _ = shap_values(model, X[rows])
    return aggregate(phi, model.feature_names, model.encoder.categories)
