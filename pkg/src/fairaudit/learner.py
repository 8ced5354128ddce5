"""Gradient-boosted trees with logistic loss, the holdout/downsample/CV protocol, and tuning.

The booster grows depth-wise trees on histogram-binned features using Newton leaf
values (gradient and hessian of the logistic loss with L2 shrinkage). Each new tree
is line-searched so the full training loss never goes up from one round to the next.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numba
import numpy as np
from scipy.stats import qmc, rankdata
from sklearn.ensemble import RandomForestClassifier
from sklearn.model_selection import StratifiedKFold

from ._seeds import derive_seed, rng_for
from .tabular import Dataset

logger = logging.getLogger(__name__)

MODEL_FORMAT = "fairaudit.gbm"
MODEL_VERSION = 1
MAX_BINS = 64


class LearnerError(ValueError):
    pass


# (low, high, integer?, log-scale?)
SEARCH_BOUNDS = {
    "n_rounds": (50, 500, True, False),
    "max_depth": (2, 8, True, False),
    "learning_rate": (0.01, 0.3, False, True),
    "min_child_weight": (1.0, 10.0, False, False),
    "subsample": (0.5, 1.0, False, False),
    "l2_reg": (0.0, 10.0, False, False),
}


@dataclass(frozen=True)
class HyperParams:
    n_rounds: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1
    min_child_weight: float = 1.0
    subsample: float = 1.0
    l2_reg: float = 1.0

    def __post_init__(self):
        if self.n_rounds < 0 or self.max_depth < 1:
            raise LearnerError("n_rounds must be >= 0 and max_depth >= 1")
        if not 0 < self.subsample <= 1:
            raise LearnerError("subsample must lie in (0, 1]")
        if self.l2_reg < 0 or self.learning_rate <= 0 or self.min_child_weight < 0:
            raise LearnerError("l2_reg, min_child_weight must be >= 0 and learning_rate > 0")

    def within_bounds(self, bounds=SEARCH_BOUNDS) -> bool:
        return all(lo <= getattr(self, k) <= hi for k, (lo, hi, _, _) in bounds.items())

    @classmethod
    def from_unit(cls, u: Sequence[float], bounds=SEARCH_BOUNDS) -> "HyperParams":
        """Map a point of the unit cube onto the search box."""
        values = {}
        for x, (name, (lo, hi, integer, log)) in zip(u, bounds.items()):
            if log:
                v = math.exp(math.log(lo) + float(x) * (math.log(hi) - math.log(lo)))
            else:
                v = lo + float(x) * (hi - lo)
            if integer:
                v = int(min(hi, math.floor(v + 0.5)))
            values[name] = v
        return cls(**values)


@dataclass(frozen=True)
class PerfMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float

    @classmethod
    def mean(cls, items: Sequence["PerfMetrics"]) -> "PerfMetrics":
        return cls(**{f.name: float(np.mean([getattr(m, f.name) for m in items])) for f in fields(cls)})


# ---------------------------------------------------------------- encoding

@dataclass(frozen=True)
class EncodedColumn:
    name: str
    source: str
    category: str
    level: str | None = None  # set for one-hot columns of categorical features


@dataclass(frozen=True)
class FeatureEncoder:
    """Maps feature columns of a Dataset to a float matrix; categoricals are one-hot."""

    columns: tuple[EncodedColumn, ...]

    @classmethod
    def fit(cls, ds: Dataset, features: Sequence[str] | None = None) -> "FeatureEncoder":
        features = list(ds.schema.features if features is None else features)
        cols = []
        for name in features:
            col = ds.schema[name]
            if col.role != "feature":
                raise LearnerError(f"{name!r} has role {col.role!r}; only features may be modelled")
            if col.kind == "numeric":
                cols.append(EncodedColumn(name, name, col.category))
            else:
                for level in ds.levels(name):
                    cols.append(EncodedColumn(f"{name}={level}", name, col.category, level))
        return cls(tuple(cols))

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def categories(self) -> list[str]:
        return [c.category for c in self.columns]

    def transform(self, ds: Dataset) -> np.ndarray:
        frame = ds.frame
        missing = sorted({c.source for c in self.columns if c.source not in frame.columns})
        if missing:
            raise LearnerError(f"data lacks model feature column(s) {missing}")
        out = np.empty((len(frame), len(self.columns)), dtype=np.float64)
        for j, c in enumerate(self.columns):
            if c.level is None:
                out[:, j] = frame[c.source].to_numpy(dtype=np.float64)
            else:
                out[:, j] = (frame[c.source] == c.level).to_numpy(dtype=np.float64)
        return out


# ---------------------------------------------------------------- trees

@dataclass
class Tree:
    """Array-encoded binary tree. `feature[i] == -1` marks a leaf.

    Rows go left when ``x[feature] <= threshold``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            inner = self.feature[node] >= 0
            if not inner.any():
                return node
            r = rows[inner]
            nd = node[inner]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[inner] = np.where(go_left, self.left[nd], self.right[nd])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def expected_value(self) -> float:
        leaves = self.feature < 0
        return float(np.sum(self.value[leaves] * self.cover[leaves]) / self.cover[0])

    def depth(self) -> int:
        best = 0
        stack = [(0, 0)]
        while stack:
            i, d = stack.pop()
            best = max(best, d)
            if self.feature[i] >= 0:
                stack.append((self.left[i], d + 1))
                stack.append((self.right[i], d + 1))
        return best

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [None if math.isnan(t) else float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray([np.nan if t is None else t for t in d["threshold"]], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
            cover=np.asarray(d["cover"], dtype=np.float64),
        )

    @classmethod
    def leaf(cls, value: float, cover: float) -> "Tree":
        return cls(
            np.array([-1]), np.array([np.nan]), np.array([-1]), np.array([-1]),
            np.array([float(value)]), np.array([float(cover)]),
        )


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def logistic_loss(y: np.ndarray, raw: np.ndarray) -> float:
    """Mean negative log-likelihood of labels under log-odds `raw`."""
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


@dataclass
class GbmModel:
    trees: list[Tree]
    learning_rate: float
    base_score: float
    params: HyperParams
    encoder: FeatureEncoder
    train_loss: list[float] = field(default_factory=list)

    @property
    def feature_names(self) -> list[str]:
        return self.encoder.names

    def raw_matrix(self, X: np.ndarray) -> np.ndarray:
        raw = np.full(X.shape[0], self.base_score, dtype=np.float64)
        for t in self.trees:
            raw += t.predict(X)
        return raw

    def proba_matrix(self, X: np.ndarray) -> np.ndarray:
        return sigmoid(self.raw_matrix(X))

    def predict_raw(self, ds: Dataset) -> np.ndarray:
        return self.raw_matrix(self.encoder.transform(ds))

    def predict_proba(self, ds: Dataset) -> np.ndarray:
        return sigmoid(self.predict_raw(ds))

    def predict(self, ds: Dataset, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(ds) >= threshold).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "params": asdict(self.params),
            "features": [asdict(c) for c in self.encoder.columns],
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbmModel":
        if d.get("format") != MODEL_FORMAT:
            raise LearnerError(f"not a {MODEL_FORMAT} document")
        if d.get("version") != MODEL_VERSION:
            raise LearnerError(f"unsupported model version {d.get('version')!r}")
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            learning_rate=float(d["learning_rate"]),
            base_score=float(d["base_score"]),
            params=HyperParams(**d["params"]),
            encoder=FeatureEncoder(tuple(EncodedColumn(**c) for c in d["features"])),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "GbmModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------- booster

def _bin_edges(x: np.ndarray, max_bins: int = MAX_BINS) -> np.ndarray:
    x = x[~np.isnan(x)]
    uniq = np.unique(x)
    if uniq.size <= 1:
        return np.empty(0)
    if uniq.size <= max_bins:
        return uniq[:-1]
    qs = np.quantile(x, np.linspace(0, 1, max_bins + 1)[1:-1], method="lower")
    edges = np.unique(qs)
    return edges[edges < uniq[-1]]


def _bin(X: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    # bin b holds values with edges[b-1] < x <= edges[b]; NaN lands in the last bin
    out = np.empty(X.shape, dtype=np.int32)
    for j, e in enumerate(edges):
        out[:, j] = np.searchsorted(e, X[:, j], side="left")
    return out


@numba.njit(cache=True, nogil=True)
def _histograms(Xb, g, h, slot, k, n_bins):
    p = Xb.shape[1]
    G = np.zeros((k, p, n_bins))
    H = np.zeros((k, p, n_bins))
    C = np.zeros((k, p, n_bins))
    for r in range(Xb.shape[0]):
        s = slot[r]
        if s < 0:
            continue
        gr = g[r]
        hr = h[r]
        for j in range(p):
            b = Xb[r, j]
            G[s, j, b] += gr
            H[s, j, b] += hr
            C[s, j, b] += 1.0
    return G, H, C


def _grow_tree(Xb, g, h, edges, n_bins, params: HyperParams, lr: float):
    """Depth-wise growth over the histogram of all frontier nodes at once."""
    m, p = Xb.shape
    lam = params.l2_reg
    feature, threshold, left, right, value, cover, split_bin = [], [], [], [], [], [], []

    def new_node(G, H, C):
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        split_bin.append(-1)
        value.append(-lr * G / (H + lam) if H + lam > 0 else 0.0)
        cover.append(C)
        return len(feature) - 1

    root = new_node(g.sum(), h.sum(), m)
    frontier = [root]
    slot = np.zeros(m, dtype=np.int64)  # frontier position of each row, -1 once settled

    for _depth in range(params.max_depth):
        active = np.flatnonzero(slot >= 0)
        if active.size == 0 or not frontier:
            break
        k = len(frontier)
        G, H, C = _histograms(Xb, g, h, slot, k, n_bins)
        GL, HL, CL = (np.cumsum(a, axis=2)[:, :, :-1] for a in (G, H, C))
        Gt = G[:, 0, :].sum(axis=1)[:, None, None]
        Ht = H[:, 0, :].sum(axis=1)[:, None, None]
        Ct = C[:, 0, :].sum(axis=1)[:, None, None]
        GR, HR, CR = Gt - GL, Ht - HL, Ct - CL
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = GL**2 / (HL + lam) + GR**2 / (HR + lam) - Gt**2 / (Ht + lam)
        ok = (CL > 0) & (CR > 0) & (HL >= params.min_child_weight) & (HR >= params.min_child_weight)
        gain = np.where(ok & np.isfinite(gain), gain, -np.inf)
        flat = gain.reshape(k, -1)
        best = np.argmax(flat, axis=1)
        best_gain = flat[np.arange(k), best]

        new_frontier = []
        new_slot = np.full(m, -1, dtype=np.int64)
        row_slot = slot[active]
        for pos, node in enumerate(frontier):
            rows = active[row_slot == pos]
            if not best_gain[pos] > 1e-12:
                continue
            f, b = divmod(int(best[pos]), n_bins - 1)
            go_left = Xb[rows, f] <= b
            lrows, rrows = rows[go_left], rows[~go_left]
            feature[node] = f
            threshold[node] = float(edges[f][b])
            split_bin[node] = b
            left[node] = new_node(g[lrows].sum(), h[lrows].sum(), lrows.size)
            right[node] = new_node(g[rrows].sum(), h[rrows].sum(), rrows.size)
            new_slot[lrows] = len(new_frontier)
            new_frontier.append(left[node])
            new_slot[rrows] = len(new_frontier)
            new_frontier.append(right[node])
        frontier = new_frontier
        slot = new_slot

    tree = Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
        cover=np.asarray(cover, dtype=np.float64),
    )
    return tree, np.asarray(split_bin, dtype=np.int64)


def _apply_binned(tree: Tree, split_bin: np.ndarray, Xb: np.ndarray) -> np.ndarray:
    node = np.zeros(Xb.shape[0], dtype=np.int64)
    rows = np.arange(Xb.shape[0])
    while True:
        inner = tree.feature[node] >= 0
        if not inner.any():
            return node
        r, nd = rows[inner], node[inner]
        go_left = Xb[r, tree.feature[nd]] <= split_bin[nd]
        node[inner] = np.where(go_left, tree.left[nd], tree.right[nd])


def fit_matrix(
    X: np.ndarray,
    y: np.ndarray,
    params: HyperParams,
    seed: int,
    encoder: FeatureEncoder | None = None,
) -> GbmModel:
    """Boost on a ready feature matrix. `train_gbm` is the Dataset-level entry point."""
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0 or np.unique(y).size < 2:
        raise LearnerError("training set is degenerate: need rows of both classes")
    if encoder is None:
        encoder = FeatureEncoder(tuple(EncodedColumn(f"x{j}", f"x{j}", "features") for j in range(X.shape[1])))
    n, p = X.shape
    prior = float(np.clip(y.mean(), 1e-12, 1 - 1e-12))
    base = math.log(prior / (1 - prior))
    edges = [_bin_edges(X[:, j]) for j in range(p)]
    n_bins = max([e.size + 1 for e in edges] + [2])
    Xb = _bin(X, edges)
    rng = rng_for(seed, "gbm")

    raw = np.full(n, base)
    loss = logistic_loss(y, raw)
    history = [loss]
    trees = []
    for _ in range(params.n_rounds):
        prob = sigmoid(raw)
        grad = prob - y
        hess = prob * (1.0 - prob)
        if params.subsample < 1.0:
            take = max(1, int(math.floor(params.subsample * n + 0.5)))
            rows = np.sort(rng.choice(n, size=take, replace=False))
        else:
            rows = np.arange(n)
        tree, split_bin = _grow_tree(Xb[rows], grad[rows], hess[rows], edges, n_bins, params, params.learning_rate)
        step = tree.value[_apply_binned(tree, split_bin, Xb)]
        # halve the step until the full training loss does not increase
        scale = 1.0
        for _halving in range(30):
            trial = raw + scale * step
            new_loss = logistic_loss(y, trial)
            if new_loss <= loss:
                break
            scale *= 0.5
        else:
            scale, trial, new_loss = 0.0, raw.copy(), loss
        if scale != 1.0:
            tree.value = tree.value * scale
        raw, loss = trial, new_loss
        history.append(loss)
        trees.append(tree)
    return GbmModel(trees, params.learning_rate, base, params, encoder, history)


def train_gbm(
    train: Dataset,
    params: HyperParams | None = None,
    seed: int = 0,
    features: Sequence[str] | None = None,
) -> GbmModel:
    """Fit the booster on the feature columns of `train`.

    Sensitive, target and ignored columns never reach the encoder, so no tree can
    split on them.
    """
    params = params or HyperParams()
    encoder = FeatureEncoder.fit(train, features)
    X = encoder.transform(train)
    return fit_matrix(X, train.y, params, seed, encoder)


# ---------------------------------------------------------------- forest

def forest_importance(X: np.ndarray, y: np.ndarray, n_trees: int = 100, seed: int = 0) -> np.ndarray:
    """Gini importance (total impurity decrease, normalized) of a random forest."""
    forest = RandomForestClassifier(n_estimators=n_trees, random_state=seed, n_jobs=1)
    forest.fit(X, y)
    return forest.feature_importances_


# ---------------------------------------------------------------- protocol pieces

def holdout_indices(n: int, train_frac: float = 0.7, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint train/test index split with round(train_frac * n) training rows."""
    if not 0 < train_frac < 1:
        raise LearnerError("train_frac must lie strictly between 0 and 1")
    if n < 2:
        raise LearnerError("need at least 2 rows to split")
    n_train = int(math.floor(train_frac * n + 0.5))
    perm = rng_for(seed, "holdout").permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_holdout(ds: Dataset, train_frac: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    train_idx, test_idx = holdout_indices(ds.n, train_frac, seed)
    return ds.take(train_idx), ds.take(test_idx)


def downsample_indices(y: np.ndarray, ratio: float = 1.0, seed: int = 0) -> np.ndarray:
    """Every minority row plus round(ratio * minority) majority rows drawn without replacement."""
    y = np.asarray(y)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    if pos.size == 0 or neg.size == 0:
        raise LearnerError("downsampling needs both classes present")
    minority, majority = (pos, neg) if pos.size <= neg.size else (neg, pos)
    keep = min(majority.size, int(math.floor(ratio * minority.size + 0.5)))
    chosen = rng_for(seed, "downsample").choice(majority, size=keep, replace=False)
    return np.sort(np.concatenate([minority, chosen]))


def downsample(ds: Dataset, ratio: float = 1.0, seed: int = 0) -> Dataset:
    return ds.take(downsample_indices(ds.y, ratio, seed))


def stratified_kfold(data: Dataset | np.ndarray, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled stratified folds as (train positions, validation positions)."""
    y = data.y if isinstance(data, Dataset) else np.asarray(data)
    counts = np.bincount(y.astype(np.int64), minlength=2)
    if counts.min() < k:
        raise LearnerError(f"each class needs at least k={k} rows, got {counts.tolist()}")
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=derive_seed(seed, "kfold") % (2**31))
    return [(tr, va) for tr, va in skf.split(np.zeros(len(y)), y)]


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic, ties averaged."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n1, n0 = int(labels.sum()), int((~labels).sum())
    if n1 == 0 or n0 == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def metrics_from_scores(scores, labels, threshold: float = 0.5) -> PerfMetrics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.size == 0:
        raise LearnerError("cannot evaluate on an empty set")
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    precision = tp / (tp + fp) if tp + fp else float("nan")
    recall = tp / (tp + fn) if tp + fn else float("nan")
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else float("nan")
    return PerfMetrics(
        accuracy=float(np.mean(pred == labels)),
        precision=precision,
        recall=recall,
        f1=f1,
        auc=auc(scores, labels),
    )


def evaluate(model: GbmModel, test: Dataset, threshold: float = 0.5) -> PerfMetrics:
    return metrics_from_scores(model.predict_proba(test), test.y, threshold)


# ---------------------------------------------------------------- tuning

class SearchStrategy(Protocol):
    def propose(self, i: int, history: list[tuple[HyperParams, float]]) -> HyperParams: ...


class QuasiRandomSearch:
    """Scrambled Sobol points over the search box, in order."""

    def __init__(self, seed: int = 0, bounds=SEARCH_BOUNDS):
        self.bounds = bounds
        self._sampler = qmc.Sobol(d=len(bounds), scramble=True, seed=derive_seed(seed, "sobol"))
        self._points: list[np.ndarray] = []

    def _point(self, i: int) -> np.ndarray:
        while len(self._points) <= i:
            self._points.extend(self._sampler.random(1))
        return self._points[i]

    def propose(self, i, history):
        return HyperParams.from_unit(self._point(i), self.bounds)


class SurrogateSearch:
    """Sequential search: Gaussian-process surrogate with expected improvement.

    The first `n_init` proposals are quasi-random; later ones maximise expected
    improvement over a fixed Sobol candidate pool.
    """

    def __init__(self, seed: int = 0, bounds=SEARCH_BOUNDS, n_init: int = 8, pool: int = 512):
        self.bounds = bounds
        self.n_init = n_init
        self._init = QuasiRandomSearch(seed, bounds)
        self._pool = qmc.Sobol(d=len(bounds), scramble=True, seed=derive_seed(seed, "pool")).random(pool)
        self._seed = seed

    def _to_unit(self, hp: HyperParams) -> np.ndarray:
        u = []
        for name, (lo, hi, _, log) in self.bounds.items():
            v = getattr(hp, name)
            u.append((math.log(v) - math.log(lo)) / (math.log(hi) - math.log(lo)) if log else (v - lo) / (hi - lo))
        return np.asarray(u)

    def propose(self, i, history):
        if i < self.n_init or len(history) < 2:
            return self._init.propose(i, history)
        from scipy.stats import norm
        from sklearn.exceptions import ConvergenceWarning
        from sklearn.gaussian_process import GaussianProcessRegressor
        from sklearn.gaussian_process.kernels import ConstantKernel, Matern, WhiteKernel

        U = np.array([self._to_unit(hp) for hp, _ in history])
        s = np.array([score for _, score in history])
        kernel = ConstantKernel(1.0) * Matern(length_scale=np.full(U.shape[1], 0.3), nu=2.5) + WhiteKernel(1e-4)
        gp = GaussianProcessRegressor(kernel, normalize_y=True, random_state=derive_seed(self._seed, "gp", i) % (2**31))
        with warnings.catch_warnings():
            # small histories routinely push kernel hyperparameters onto their bounds
            warnings.simplefilter("ignore", ConvergenceWarning)
            gp.fit(U, s)
        mu, sd = gp.predict(self._pool, return_std=True)
        best = s.max()
        z = (mu - best) / np.maximum(sd, 1e-12)
        ei = (mu - best) * norm.cdf(z) + sd * norm.pdf(z)
        return HyperParams.from_unit(self._pool[int(np.argmax(ei))], self.bounds)


class GridSearch:
    """Evaluate an explicit list of candidates in order (cycling if the budget is larger)."""

    def __init__(self, candidates: Sequence[HyperParams]):
        if not candidates:
            raise LearnerError("grid search needs at least one candidate")
        self.candidates = list(candidates)

    def propose(self, i, history):
        return self.candidates[i % len(self.candidates)]


def make_search(name: str, seed: int) -> SearchStrategy:
    if name == "quasi_random":
        return QuasiRandomSearch(seed)
    if name == "surrogate":
        return SurrogateSearch(seed)
    raise LearnerError(f"unknown search strategy {name!r}")


@dataclass(frozen=True)
class TuningResult:
    best: HyperParams
    best_score: float
    trials: tuple[tuple[HyperParams, float], ...]


def cv_auc(ds: Dataset, params: HyperParams, k: int = 5, seed: int = 0, features=None, threads: int = 1) -> float:
    """Mean validation AUC over stratified folds."""
    encoder = FeatureEncoder.fit(ds, features)
    X, y = encoder.transform(ds), ds.y
    folds = stratified_kfold(y, k, seed)

    def one(i):
        tr, va = folds[i]
        model = fit_matrix(X[tr], y[tr], params, derive_seed(seed, "cv", i), encoder)
        return auc(model.raw_matrix(X[va]), y[va])

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        scores = list(pool.map(one, range(len(folds))))
    return float(np.mean(scores))


def search_hyperparams(
    train: Dataset,
    budget: int = 30,
    seed: int = 0,
    search: SearchStrategy | str = "quasi_random",
    objective: Callable[[HyperParams], float] | None = None,
    k: int = 5,
    features=None,
    threads: int = 1,
) -> TuningResult:
    """Evaluate `budget` candidates and keep the best (first one on ties)."""
    if budget < 1:
        raise LearnerError("tuning budget must be at least 1")
    if isinstance(search, str):
        search = make_search(search, seed)
    if objective is None:
        def objective(hp):
            return cv_auc(train, hp, k, seed, features, threads)
    history: list[tuple[HyperParams, float]] = []
    for i in range(budget):
        hp = search.propose(i, history)
        score = float(objective(hp))
        history.append((hp, score))
        logger.debug("tuning trial %d: %s -> %.4f", i, hp, score)
    best_i = max(range(len(history)), key=lambda i: (history[i][1], -i))
    return TuningResult(history[best_i][0], history[best_i][1], tuple(history))


def tune(train: Dataset, budget: int = 30, seed: int = 0, **kwargs) -> HyperParams:
    return search_hyperparams(train, budget, seed, **kwargs).best


# ---------------------------------------------------------------- full protocol

@dataclass(frozen=True)
class ProtocolParams:
    train_frac: float = 0.7
    downsample_ratio: float = 1.0
    k: int = 5
    tuning_budget: int = 30
    search: str = "quasi_random"
    decision_threshold: float = 0.5
    # fixed hyperparameters; when set, tuning is skipped
    params: HyperParams | None = None
    threads: int = 1


@dataclass
class ProtocolResult:
    train_idx: np.ndarray
    test_idx: np.ndarray
    balanced_idx: np.ndarray  # indices into the full dataset
    folds: list[tuple[np.ndarray, np.ndarray]]  # positions within the balanced sample
    params: HyperParams
    tuning: TuningResult | None
    fold_metrics: list[PerfMetrics]
    mean_metrics: PerfMetrics
    model: GbmModel
    fold_models: list[GbmModel] = field(default_factory=list)

    def fold_predictions(self, test: Dataset, threshold: float = 0.5) -> np.ndarray:
        """0/1 predictions of every fold model on `test`, one row per fold."""
        X = self.model.encoder.transform(test)
        return np.stack([(m.proba_matrix(X) >= threshold).astype(np.int64) for m in self.fold_models])

    def summary(self) -> dict:
        return {
            "n_train": int(self.train_idx.size),
            "n_test": int(self.test_idx.size),
            "n_balanced": int(self.balanced_idx.size),
            "n_folds": len(self.folds),
            "tuning_trials": 0 if self.tuning is None else len(self.tuning.trials),
            "params": asdict(self.params),
        }


def run_protocol(
    ds: Dataset,
    seed: int,
    features: Sequence[str] | None = None,
    pp: ProtocolParams = ProtocolParams(),
) -> ProtocolResult:
    """Holdout split, downsample the training part, tune, fit one model per fold.

    Every fold model is scored on the untouched holdout and the metrics are
    averaged; the fold models also drive the fairness audit. A final model refit
    on the whole balanced sample is returned for attribution.
    """
    train_idx, test_idx = holdout_indices(ds.n, pp.train_frac, seed)
    y = ds.y
    balanced_idx = train_idx[downsample_indices(y[train_idx], pp.downsample_ratio, seed)]
    balanced = ds.take(balanced_idx)
    test = ds.take(test_idx)

    tuning = None
    if pp.params is not None:
        params = pp.params
    else:
        tuning = search_hyperparams(
            balanced, pp.tuning_budget, seed, search=pp.search, k=pp.k, features=features, threads=pp.threads
        )
        params = tuning.best

    encoder = FeatureEncoder.fit(balanced, features)
    Xb, yb = encoder.transform(balanced), balanced.y
    Xt, yt = encoder.transform(test), test.y
    folds = stratified_kfold(yb, pp.k, seed)

    def one(i):
        tr, _ = folds[i]
        model = fit_matrix(Xb[tr], yb[tr], params, derive_seed(seed, "fold", i), encoder)
        return model, metrics_from_scores(model.proba_matrix(Xt), yt, pp.decision_threshold)

    with ThreadPoolExecutor(max_workers=max(1, pp.threads)) as pool:
        fitted = list(pool.map(one, range(len(folds))))
    fold_models = [m for m, _ in fitted]
    fold_metrics = [pm for _, pm in fitted]
    final = fit_matrix(Xb, yb, params, derive_seed(seed, "final"), encoder)
    return ProtocolResult(
        train_idx, test_idx, balanced_idx, folds, params, tuning,
        fold_metrics, PerfMetrics.mean(fold_metrics), final, fold_models,
    )
