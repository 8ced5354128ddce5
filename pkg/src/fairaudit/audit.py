"""Audit orchestration: group comparisons, bootstrap, data variations and decomposition."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import fairmetrics as fm
from ._seeds import derive_seed
from .attrib import CategoryImportance, explain_sample
from .config import RunConfig
from .learner import GbmModel, PerfMetrics, ProtocolParams, ProtocolResult, holdout_indices, run_protocol
from .prep import ReductionTrace, reduce_features
from .tabular import (
    Dataset,
    DescriptiveStats,
    Schema,
    SensitiveRules,
    derive_intersections,
    describe,
    discretize_sensitive,
)

logger = logging.getLogger(__name__)

TRADITIONAL = ("customer", "loan", "credit_bureau")
BANK = ("transaction_basic", "transaction_category")
FOOTPRINT = ("digital_footprint", "user_agent")
VARIATION_NAMES = ("baseline", "traditional", "traditional+bank", "traditional+footprint")


class AuditError(ValueError):
    pass


@dataclass(frozen=True)
class GroupComparison:
    attribute: str
    unprivileged: str
    privileged: str
    depth: int
    parents: tuple[str, str] | None = None
    n_unprivileged: int = 0
    n_privileged: int = 0
    small: bool = False

    @property
    def key(self) -> str:
        return f"{self.attribute}: {self.unprivileged} vs {self.privileged}"

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "attribute": self.attribute,
            "unprivileged": self.unprivileged,
            "privileged": self.privileged,
            "depth": self.depth,
            "parents": None if self.parents is None else list(self.parents),
            "n_unprivileged": self.n_unprivileged,
            "n_privileged": self.n_privileged,
            "small": self.small,
        }


def enumerate_comparisons(ds: Dataset, max_depth: int = 2, min_group: int = 50) -> list[GroupComparison]:
    """Every unprivileged level against the privileged level of its attribute.

    Depth 1 covers atomic sensitive attributes; depth 2 covers derived intersection
    columns, comparing each observed combined level with the doubly-privileged one.
    Groups under `min_group` rows are kept but flagged as small.
    """
    if max_depth not in (1, 2):
        raise AuditError("max_depth must be 1 or 2")
    out = []
    names = list(ds.schema.atomic_sensitive)
    if max_depth == 2:
        names += ds.schema.intersections
    for name in names:
        col = ds.schema[name]
        if col.privileged is None:
            raise AuditError(f"sensitive attribute {name!r} declares no privileged level")
        counts = ds.frame[name].value_counts()
        levels = ds.levels(name)
        if col.privileged not in levels:
            logger.warning("privileged level %r of %s not observed; skipping", col.privileged, name)
            continue
        n_priv = int(counts[col.privileged])
        depth = 1 if col.parents is None else 2
        for level in levels:
            if level == col.privileged:
                continue
            n_u = int(counts[level])
            out.append(GroupComparison(
                name, level, col.privileged, depth, col.parents, n_u, n_priv,
                small=min(n_u, n_priv) < min_group,
            ))
    return out


# ---------------------------------------------------------------- bootstrap

@dataclass
class BootstrapSummary:
    comparisons: list[GroupComparison]
    metrics: tuple[str, ...]
    values: np.ndarray  # (comparisons, metrics, B); NaN where undefined
    point: np.ndarray  # (comparisons, metrics) on the full evaluation set
    seed: int

    @property
    def B(self) -> int:
        return self.values.shape[2]

    def _idx(self, comparison: GroupComparison | str, metric: str) -> tuple[int, int]:
        key = comparison if isinstance(comparison, str) else comparison.key
        for i, c in enumerate(self.comparisons):
            if c.key == key:
                return i, self.metrics.index(metric)
        raise KeyError(key)

    def samples(self, comparison, metric) -> np.ndarray:
        i, j = self._idx(comparison, metric)
        v = self.values[i, j]
        return v[~np.isnan(v)]

    def n_undefined(self, comparison, metric) -> int:
        i, j = self._idx(comparison, metric)
        return int(np.isnan(self.values[i, j]).sum())

    def unreliable(self, comparison, metric) -> bool:
        return self.n_undefined(comparison, metric) > 0.5 * self.B

    def mean(self, comparison, metric) -> float:
        s = self.samples(comparison, metric)
        return float(np.mean(s)) if s.size else float("nan")

    def std(self, comparison, metric) -> float:
        s = self.samples(comparison, metric)
        return float(np.std(s, ddof=1)) if s.size > 1 else float("nan")

    def point_estimate(self, comparison, metric) -> float:
        i, j = self._idx(comparison, metric)
        return float(self.point[i, j])


class _GroupCounter:
    """Confusion counts for every level of every audited attribute via one bincount per
    prediction vector. `pred` may be a single vector or one row per fold model."""

    def __init__(self, ds: Dataset, comparisons: Sequence[GroupComparison], pred, truth):
        self.attributes = list(dict.fromkeys(c.attribute for c in comparisons))
        codes, self.level_slot = [], {}
        offset = 0
        for name in self.attributes:
            levels = ds.levels(name)
            lookup = {lv: i for i, lv in enumerate(levels)}
            # missing values go to a spare slot that no comparison reads
            code = ds.frame[name].map(lookup).fillna(len(levels)).to_numpy(dtype=np.int64)
            codes.append(code + offset)
            for lv, i in lookup.items():
                self.level_slot[(name, lv)] = offset + i
            offset += len(levels) + 1
        self.n_slots = offset
        pred = np.atleast_2d(np.asarray(pred)).astype(bool)
        truth = np.asarray(truth).astype(bool)
        if pred.shape[1] != truth.shape[0]:
            raise AuditError("predictions and labels differ in length")
        # cell layout matches fairmetrics count arrays: tp, fp, tn, fn
        cells = np.where(pred, np.where(truth, 0, 1), np.where(truth, 3, 2))
        grid = np.stack(codes, axis=1) * 4 if codes else np.zeros((truth.shape[0], 0), np.int64)
        self.keys = [grid + c[:, None] for c in cells]
        self.u_slots = np.array([self.level_slot[(c.attribute, c.unprivileged)] for c in comparisons], dtype=np.int64)
        self.p_slots = np.array([self.level_slot[(c.attribute, c.privileged)] for c in comparisons], dtype=np.int64)

    def counts(self, rows: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Unprivileged and privileged count arrays, shaped (predictors, comparisons, 4)."""
        tables = []
        for keys in self.keys:
            k = keys if rows is None else keys[rows]
            tables.append(np.bincount(k.ravel(), minlength=self.n_slots * 4).reshape(self.n_slots, 4))
        table = np.stack(tables)
        return table[:, self.u_slots], table[:, self.p_slots]


def _metric_stack(u, p, metrics, strict_aod) -> np.ndarray:
    """Metrics per comparison, averaged over predictors; undefined for any one means NaN."""
    res = fm.batch_metrics(u, p, strict_as_printed=strict_aod)
    return np.stack([res[m] for m in metrics], axis=-1).mean(axis=0)


def bootstrap_predictions(
    ds: Dataset,
    pred: np.ndarray,
    comparisons: Sequence[GroupComparison],
    B: int = 500,
    seed: int = 0,
    threads: int = 1,
    strict_aod: bool = False,
    metrics: tuple[str, ...] = fm.METRICS,
) -> BootstrapSummary:
    """Resample rows with replacement B times and recompute every disparity.

    `pred` is one 0/1 vector or a (folds, rows) array; with several fold models each
    metric is the average of the per-model values on the same resample. Iteration b draws its rows from a seed derived from (seed, b), so results do not
    depend on how iterations are spread over threads.
    """
    if B < 1:
        raise AuditError("bootstrap needs at least one iteration")
    comparisons = list(comparisons)
    counter = _GroupCounter(ds, comparisons, pred, ds.y)
    n = ds.n
    point = _metric_stack(*counter.counts(), metrics, strict_aod) if comparisons else np.zeros((0, len(metrics)))
    values = np.full((len(comparisons), len(metrics), B), np.nan)

    def run(chunk):
        for b in chunk:
            rows = np.random.default_rng(derive_seed(seed, "bootstrap", b)).integers(0, n, size=n)
            values[:, :, b] = _metric_stack(*counter.counts(rows), metrics, strict_aod)

    if comparisons:
        chunks = np.array_split(np.arange(B), max(1, threads))
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            list(pool.map(run, chunks))
    summary = BootstrapSummary(comparisons, tuple(metrics), values, point, seed)
    for c in comparisons:
        for m in ("spd", "aod", "prp"):
            if m in metrics and summary.unreliable(c, m):
                logger.warning("%s / %s undefined in more than half of the iterations", c.key, m)
    return summary


def bootstrap_audit(
    model: GbmModel | Sequence[GbmModel],
    test: Dataset,
    comparisons: Sequence[GroupComparison],
    B: int = 500,
    seed: int = 0,
    threshold: float = 0.5,
    **kwargs,
) -> BootstrapSummary:
    """Score `test` once, then bootstrap every comparison's disparities.

    `model` may be a single model or a list of fold models whose metrics are averaged.
    """
    models = model if isinstance(model, (list, tuple)) else [model]
    pred = np.stack([m.predict(test, threshold) for m in models])
    return bootstrap_predictions(test, pred, comparisons, B, seed, **kwargs)


# ---------------------------------------------------------------- t-test

def ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided Welch t-test of mean(a) - mean(b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise AuditError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0:
        raise AuditError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    dof = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = 2.0 * stats.t.sf(abs(t), dof)
    return float(t), float(min(1.0, p))


# ---------------------------------------------------------------- separation decomposition

@dataclass(frozen=True)
class SeparationRow:
    intersection: str
    parent_attribute: str
    parent_level: str
    child_attribute: str
    child_level: str
    group: str
    positives: int
    negatives: int
    tpr: float
    fpr: float
    parent_tpr: float
    parent_fpr: float
    privileged: bool
    parent_privileged: bool


def _rates(preds: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> tuple[float, float, int, int]:
    """Fold-averaged TPR and FPR within `mask`, plus its positive and negative counts."""
    tpr, fpr = [], []
    for pred in preds:
        r = fm.confusion(pred, truth, mask).rates()
        tpr.append(_nan(r.tpr))
        fpr.append(_nan(r.fpr))
    return float(np.mean(tpr)), float(np.mean(fpr)), int(truth[mask].sum()), int((~truth[mask]).sum())


def separation_table(ds: Dataset, pred: np.ndarray, comparisons: Sequence[GroupComparison]) -> list[SeparationRow]:
    """TPR/FPR per intersectional subgroup next to the pooled rates of its parent level.

    Each intersection is broken down from both sides (parent = either attribute).
    Parent rates pool the children's counts, so they equal the positive-weighted
    (TPR) and negative-weighted (FPR) averages of the child rates. A (folds, rows)
    prediction array averages each rate over the fold models, which keeps that identity
    because the weights depend on the labels only.
    """
    preds = np.atleast_2d(np.asarray(pred)).astype(bool)
    truth = ds.y.astype(bool)
    rows = []
    for name in dict.fromkeys(c.attribute for c in comparisons if c.depth == 2):
        a, b = ds.schema[name].parents
        pa, pb = ds.schema[a].privileged, ds.schema[b].privileged
        va, vb = ds.frame[a].to_numpy(), ds.frame[b].to_numpy()
        for parent, child, pv, cv, p_priv, c_priv in ((a, b, va, vb, pa, pb), (b, a, vb, va, pb, pa)):
            for plevel in ds.levels(parent):
                pmask = pv == plevel
                if not pmask.any():
                    continue
                parent_tpr, parent_fpr, _, _ = _rates(preds, truth, pmask)
                for clevel in ds.levels(child):
                    mask = pmask & (cv == clevel)
                    if not mask.any():
                        continue
                    tpr, fpr, pos, neg = _rates(preds, truth, mask)
                    group = f"{plevel}-{clevel}" if parent == a else f"{clevel}-{plevel}"
                    rows.append(SeparationRow(
                        name, parent, plevel, child, clevel, group, pos, neg, tpr, fpr,
                        parent_tpr, parent_fpr, plevel == p_priv and clevel == c_priv, plevel == p_priv,
                    ))
    return rows


def _nan(v):
    return float("nan") if v is None else float(v)


def decompose_separation(model, test: Dataset, comparisons, threshold: float = 0.5) -> list[SeparationRow]:
    """Separation breakdown for one model or a list of fold models scored on `test`."""
    models = model if isinstance(model, (list, tuple)) else [model]
    return separation_table(test, np.stack([m.predict(test, threshold) for m in models]), comparisons)


# ---------------------------------------------------------------- data variations

@dataclass(frozen=True)
class VariationSpec:
    name: str
    categories: frozenset[str]

    def features(self, schema: Schema) -> list[str]:
        return [f for f in schema.features if schema[f].category in self.categories]


def standard_variations(schema: Schema) -> list[VariationSpec]:
    """Baseline plus the traditional / +bank / +footprint subsets available in `schema`."""
    present = set(schema.categories())
    trad = frozenset(present & set(TRADITIONAL))
    if not trad:
        raise AuditError("schema has none of the traditional categories " + ", ".join(TRADITIONAL))
    specs = [
        VariationSpec("baseline", frozenset(present)),
        VariationSpec("traditional", trad),
        VariationSpec("traditional+bank", trad | (present & set(BANK))),
        VariationSpec("traditional+footprint", trad | (present & set(FOOTPRINT))),
    ]
    check_nesting(specs)
    return specs


def check_nesting(specs: Sequence[VariationSpec]) -> None:
    by_name = {s.name: s.categories for s in specs}
    for outer, inner in (
        ("traditional+bank", "traditional"), ("baseline", "traditional+bank"),
        ("traditional+footprint", "traditional"), ("baseline", "traditional+footprint"),
    ):
        if outer in by_name and inner in by_name and not by_name[inner] <= by_name[outer]:
            raise AuditError(f"variation {inner!r} is not contained in {outer!r}")


@dataclass
class VariationResult:
    spec: VariationSpec
    features: list[str]
    protocol: ProtocolResult
    pred: np.ndarray  # (folds, holdout rows) 0/1 predictions
    bootstrap: BootstrapSummary

    @property
    def performance(self) -> PerfMetrics:
        return self.protocol.mean_metrics


def run_variations(
    ds: Dataset,
    specs: Sequence[VariationSpec],
    seed: int,
    comparisons: Sequence[GroupComparison] | None = None,
    protocol: ProtocolParams = ProtocolParams(),
    B: int = 500,
    strict_aod: bool = False,
    min_group: int = 50,
    max_depth: int = 2,
) -> dict[str, VariationResult]:
    """Same split, balancing, folds, tuning and bootstrap seeds for every variation;
    only the feature-category mask changes. Disparities average the fold models'
    values on the holdout, mirroring how the performance metrics are averaged."""
    known = set(ds.schema.categories())
    for s in specs:
        unknown = sorted(s.categories - known)
        if unknown:
            raise AuditError(f"variation {s.name!r} names unknown categories {unknown}")
        if not s.features(ds.schema):
            raise AuditError(f"variation {s.name!r} selects no features")
    check_nesting(specs)
    out = {}
    for s in specs:
        features = s.features(ds.schema)
        res = run_protocol(ds, seed, features, protocol)
        test = ds.take(res.test_idx)
        comps = comparisons if comparisons is not None else enumerate_comparisons(test, max_depth, min_group)
        pred = res.fold_predictions(test, protocol.decision_threshold)
        boot = bootstrap_predictions(test, pred, comps, B, seed, protocol.threads, strict_aod)
        out[s.name] = VariationResult(s, features, res, pred, boot)
        logger.info("variation %s: mean holdout AUC %.4f", s.name, res.mean_metrics.auc)
    return out


@dataclass(frozen=True)
class VariationDelta:
    variation: str
    comparison: str
    metric: str
    baseline_mean: float
    variation_mean: float
    delta: float
    t: float
    p: float

    @property
    def significant(self) -> bool:
        return not math.isnan(self.p) and self.p < 0.05


def variation_deltas(
    results: dict[str, VariationResult], metrics: Sequence[str] = ("spd", "aod", "prp"), depth: int = 1
) -> list[VariationDelta]:
    """Change in disparity magnitude versus baseline; positive means fairer."""
    if "baseline" not in results:
        raise AuditError("variation deltas need a baseline run")
    base = results["baseline"].bootstrap
    out = []
    for name, res in results.items():
        for c in base.comparisons:
            if c.depth != depth:
                continue
            for m in metrics:
                a, b = base.samples(c, m), res.bootstrap.samples(c.key, m)
                bm, vm = base.mean(c, m), res.bootstrap.mean(c.key, m)
                try:
                    t, p = ttest(a, b) if name != "baseline" else (0.0, 1.0)
                except AuditError:
                    t, p = float("nan"), float("nan")
                out.append(VariationDelta(name, c.key, m, bm, vm, abs(bm) - abs(vm), t, p))
    return out


# ---------------------------------------------------------------- verdicts

@dataclass(frozen=True)
class VerdictRow:
    variation: str
    comparison: GroupComparison
    criterion: str
    metric: str
    mean: float
    std: float
    point: float
    n_undefined: int
    unreliable: bool
    verdict: fm.FairnessVerdict | None

    @property
    def fair(self) -> bool | None:
        return None if self.verdict is None else self.verdict.fair


def verdicts(
    variation: str,
    boot: BootstrapSummary,
    thresholds: dict[str, float],
    depth: int | None = None,
) -> list[VerdictRow]:
    """Judge the bootstrap mean of each criterion's metric; unreliable ones are not judged."""
    rows = []
    for c in boot.comparisons:
        if depth is not None and c.depth != depth:
            continue
        for criterion, metric in fm.CRITERION_METRIC.items():
            mean = boot.mean(c, metric)
            unreliable = boot.unreliable(c, metric) or math.isnan(mean)
            v = None if unreliable else fm.judge(
                mean, criterion, thresholds.get(criterion, fm.DEFAULT_THRESHOLD), (c.unprivileged, c.privileged)
            )
            rows.append(VerdictRow(
                variation, c, criterion, metric, mean, boot.std(c, metric),
                boot.point_estimate(c, metric), boot.n_undefined(c, metric), unreliable, v,
            ))
    return rows


# ---------------------------------------------------------------- pipeline and report

REPORT_FORMAT = "fairaudit.report"
REPORT_VERSION = 1


@dataclass
class AuditReport:
    config: dict
    seed: int
    descriptive: DescriptiveStats
    reduction: ReductionTrace
    comparisons: list[GroupComparison]
    variations: dict[str, VariationResult]
    verdicts: list[VerdictRow]
    deltas: list[VariationDelta]
    separation: list[SeparationRow]
    importance: CategoryImportance | None = None
    notes: list[str] = field(default_factory=list)
    atomic: list[str] = field(default_factory=list)

    @property
    def n_unfair(self) -> int:
        return sum(1 for v in self.verdicts if v.fair is False)

    @property
    def exit_code(self) -> int:
        return 2 if self.n_unfair else 0

    @property
    def model(self) -> GbmModel | None:
        base = self.variations.get("baseline")
        return None if base is None else base.protocol.model

    def high_level(self) -> list[VerdictRow]:
        return [v for v in self.verdicts if v.comparison.depth == 1]

    def intersectional(self) -> list[VerdictRow]:
        return [v for v in self.verdicts if v.comparison.depth == 2]

    def to_dict(self) -> dict:
        perf = {}
        for name, res in self.variations.items():
            perf[name] = {
                "categories": sorted(res.spec.categories),
                "features": res.features,
                "folds": [asdict(m) for m in res.protocol.fold_metrics],
                "mean": asdict(res.protocol.mean_metrics),
                "protocol": res.protocol.summary(),
            }
        boot = {}
        for name, res in self.variations.items():
            b = res.bootstrap
            boot[name] = {
                "B": b.B,
                "seed": b.seed,
                "stats": [
                    {
                        "comparison": c.key,
                        "metric": m,
                        "point": b.point_estimate(c, m),
                        "mean": b.mean(c, m),
                        "std": b.std(c, m),
                        "n_undefined": b.n_undefined(c, m),
                        "unreliable": b.unreliable(c, m),
                    }
                    for c in b.comparisons
                    for m in b.metrics
                ],
            }
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "config": self.config,
            "seeds": {"master": self.seed, "bootstrap": f"derive_seed({self.seed}, 'bootstrap', b)"},
            "descriptive": {
                "n": self.descriptive.n,
                "repayment": self.descriptive.repayment,
                "rows": [asdict(r) for r in self.descriptive.rows],
            },
            "reduction": self.reduction.to_dict(),
            "comparisons": [c.to_dict() for c in self.comparisons],
            "performance": perf,
            "bootstrap": boot,
            "verdicts": [_verdict_dict(v) for v in self.verdicts],
            "variation_deltas": [
                {**asdict(d), "significant": d.significant} for d in self.deltas
            ],
            "separation": [asdict(r) for r in self.separation],
            "category_importance": None if self.importance is None else [
                {"category": c, "sum": s, "mean": m} for c, s, m in self.importance.to_rows()
            ],
            "summary": {
                "n_verdicts": len(self.verdicts),
                "n_unfair": self.n_unfair,
                "n_unreliable": sum(1 for v in self.verdicts if v.unreliable),
                "exit_code": self.exit_code,
            },
            "notes": list(self.notes),
        }


def _verdict_dict(v: VerdictRow) -> dict:
    return {
        "variation": v.variation,
        "comparison": v.comparison.key,
        "attribute": v.comparison.attribute,
        "depth": v.comparison.depth,
        "small": v.comparison.small,
        "criterion": v.criterion,
        "metric": v.metric,
        "mean": v.mean,
        "std": v.std,
        "point": v.point,
        "n_undefined": v.n_undefined,
        "unreliable": v.unreliable,
        "threshold": None if v.verdict is None else v.verdict.threshold,
        "fair": v.fair,
    }


def run_audit(ds: Dataset, cfg: RunConfig) -> AuditReport:
    """Discretize, reduce features, train per variation, attribute and audit.

    The baseline variation is always run; it provides the intersectional verdicts,
    the category importance and the separation breakdown.
    """
    cfg.validate()
    if cfg.seed is None:
        raise AuditError("a seed is required")
    seed = cfg.seed
    ds = discretize_sensitive(ds, SensitiveRules.for_schema(ds.schema))
    if cfg.max_depth >= 2:
        ds = derive_intersections(ds)
    descriptive = describe(ds)
    ds, trace = reduce_features(ds, cfg.corr_threshold, cfg.importance_cap, cfg.forest_trees, seed)

    wanted = ["baseline"] + [v for v in cfg.variations if v != "baseline"]
    by_name = {s.name: s for s in standard_variations(ds.schema)}
    specs = [by_name[v] for v in wanted]
    protocol = ProtocolParams(
        train_frac=cfg.train_frac,
        downsample_ratio=cfg.downsample_ratio,
        k=cfg.cv_k,
        tuning_budget=cfg.tuning_budget,
        search=cfg.search,
        decision_threshold=cfg.decision_threshold,
        params=cfg.fixed_params(),
        threads=cfg.threads,
    )
    _, test_idx = holdout_indices(ds.n, cfg.train_frac, seed)
    test = ds.take(test_idx)
    comparisons = enumerate_comparisons(test, cfg.max_depth, cfg.min_group)
    results = run_variations(
        ds, specs, seed, comparisons, protocol, cfg.bootstrap, cfg.aod_mode == "strict",
    )
    base = results["baseline"]
    model = base.protocol.model
    importance = explain_sample(model, model.encoder.transform(test), cfg.shap_sample, derive_seed(seed, "shap"))
    separation = separation_table(test, base.pred, comparisons)

    rows = []
    for name, res in results.items():
        rows += verdicts(name, res.bootstrap, cfg.thresholds, depth=None if name == "baseline" else 1)
    deltas = variation_deltas(results) if len(results) > 1 else []
    notes = []
    if cfg.shap_sample > test.n:
        notes.append(f"attribution sample clamped to {test.n} rows")
    small = [c.key for c in comparisons if c.small]
    if small:
        notes.append(f"{len(small)} comparison(s) involve a group under {cfg.min_group} rows")
    return AuditReport(
        cfg.echo(), seed, descriptive, trace, comparisons, results, rows, deltas, separation, importance, notes,
        list(ds.schema.atomic_sensitive),
    )


def _clean(obj):
    """JSON-safe copy: NaN and infinities become null, tuples become lists."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def report_json(report: AuditReport) -> str:
    return json.dumps(_clean(report.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _fmt(v, digits: int = 3) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def _md_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if (isinstance(c, float) and math.isnan(c)) else c for c in r])


def _verdict_cell(v: VerdictRow) -> str:
    text = _fmt(v.mean)
    if v.fair is False:
        return f"**{text}**"
    if v.fair is None:
        return text + " (unreliable)"
    return text


def _verdict_table(rows: list[VerdictRow]) -> tuple[list[str], list[list]]:
    header = ["comparison", "n (u/p)", "SPD", "AOD", "PRP"]
    grouped: dict[str, dict[str, VerdictRow]] = {}
    comps = {}
    for v in rows:
        grouped.setdefault(v.comparison.key, {})[v.metric] = v
        comps[v.comparison.key] = v.comparison
    body = []
    for key, by_metric in grouped.items():
        c = comps[key]
        size = f"{c.n_unprivileged}/{c.n_privileged}" + (" (small)" if c.small else "")
        body.append([key, size] + [_verdict_cell(by_metric[m]) if m in by_metric else "" for m in ("spd", "aod", "prp")])
    return header, body


def render_report(report: AuditReport, out: str | Path) -> list[Path]:
    """Write report.json, report.md and one CSV per table; returns the written paths."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise AuditError(f"cannot write to {out}: {exc}") from exc
    written = []

    path = out / "report.json"
    path.write_text(report_json(report), encoding="utf-8")
    written.append(path)

    t1 = [[r.attribute, r.level, r.count, r.share, r.repayment] for r in report.descriptive.rows]
    perf = [
        [name, i, m.accuracy, m.precision, m.recall, m.f1, m.auc]
        for name, res in report.variations.items()
        for i, m in enumerate(res.protocol.fold_metrics + [res.protocol.mean_metrics])
    ]
    verdict_rows = [
        [v.variation, v.comparison.key, v.comparison.depth, v.criterion, v.metric, v.mean, v.std,
         v.point, v.n_undefined, v.unreliable, "" if v.fair is None else v.fair]
        for v in report.verdicts
    ]
    vhead = ["variation", "comparison", "depth", "criterion", "metric", "mean", "std", "point",
             "n_undefined", "unreliable", "fair"]
    deltas = [[d.variation, d.comparison, d.metric, d.baseline_mean, d.variation_mean, d.delta, d.t, d.p,
               d.significant] for d in report.deltas]
    sep = [[r.intersection, r.parent_attribute, r.parent_level, r.child_attribute, r.child_level, r.group,
            r.positives, r.negatives, r.tpr, r.fpr, r.parent_tpr, r.parent_fpr] for r in report.separation]
    imp = [] if report.importance is None else [list(r) for r in report.importance.to_rows()]
    tables = {
        "descriptive.csv": (["attribute", "level", "count", "share", "repayment"], t1),
        "performance.csv": (["variation", "fold", "accuracy", "precision", "recall", "f1", "auc"], perf),
        "high_level.csv": (vhead, [r for r in verdict_rows if r[2] == 1 and r[0] == "baseline"]),
        "variation_deltas.csv": (
            ["variation", "comparison", "metric", "baseline_mean", "variation_mean", "delta", "t", "p",
             "significant"], deltas),
        "intersectional.csv": (vhead, [r for r in verdict_rows if r[2] == 2]),
        "category_importance.csv": (["category", "sum", "mean"], imp),
        "separation.csv": (
            ["intersection", "parent_attribute", "parent_level", "child_attribute", "child_level", "group",
             "positives", "negatives", "tpr", "fpr", "parent_tpr", "parent_fpr"], sep),
    }
    for name, (header, rows) in tables.items():
        _write_csv(out / name, header, rows)
        written.append(out / name)
    for name, res in report.variations.items():
        b = res.bootstrap
        header = [f"{c.key} | {m}" for c in b.comparisons for m in b.metrics]
        flat = b.values.reshape(-1, b.B).T if b.comparisons else np.zeros((b.B, 0))
        path = out / f"bootstrap_{name}.csv"
        _write_csv(path, ["iteration"] + header, [[i] + [float(x) for x in row] for i, row in enumerate(flat)])
        written.append(path)

    path = out / "report.md"
    path.write_text(_markdown(report), encoding="utf-8")
    written.append(path)
    return written


def _markdown(report: AuditReport) -> str:
    cfg = report.config
    th = cfg.get("thresholds", {})
    parts = [
        "# Fairness audit report",
        "",
        f"Seed {report.seed}; bootstrap B = {cfg.get('bootstrap')}; thresholds "
        + ", ".join(f"{k} {v}" for k, v in sorted(th.items()))
        + f". Verdicts: {len(report.verdicts)}, unfair: {report.n_unfair}.",
        "",
        "Disparities are unprivileged minus privileged and report bootstrap means. "
        "**Bold** values exceed the threshold (unfair verdict).",
        "",
        "## Descriptive statistics",
        "",
        f"n = {report.descriptive.n}, overall repayment {_fmt(report.descriptive.repayment)}",
        "",
        _md_table(["attribute", "level", "count", "share", "repayment"],
                  [[r.attribute, r.level, r.count, _fmt(r.share), _fmt(r.repayment)]
                   for r in report.descriptive.rows if r.attribute in report.atomic]),
        "",
        "## Model performance on the holdout",
        "",
        _md_table(["variation", "accuracy", "precision", "recall", "F1", "AUC"],
                  [[name, *(_fmt(getattr(res.protocol.mean_metrics, k)) for k in
                            ("accuracy", "precision", "recall", "f1", "auc"))]
                   for name, res in report.variations.items()]),
        "",
        "## Category importance",
        "",
        _md_table(["category", "sum", "mean"],
                  [] if report.importance is None else
                  [[c, _fmt(s, 4), _fmt(m, 4)] for c in report.importance.ranked("sum")
                   for s, m in [report.importance.per_category[c]]]),
        "",
        "## High-level fairness",
        "",
        _md_table(*_verdict_table([v for v in report.high_level() if v.variation == "baseline"])),
        "",
    ]
    if report.deltas:
        rows = []
        for d in report.deltas:
            if d.variation == "baseline":
                continue
            star = "*" if d.significant else ""
            rows.append([d.variation, d.comparison, d.metric.upper(), _fmt(d.delta) + star, _fmt(d.p, 4)])
        parts += [
            "## Data variations",
            "",
            "Delta = |baseline| - |variation|; positive values mean the variation is fairer. "
            "\\* marks p < 0.05 (Welch t-test on the bootstrap distributions).",
            "",
            _md_table(["variation", "comparison", "metric", "delta", "p"], rows),
            "",
        ]
    parts += [
        "## Intersectional fairness",
        "",
        _md_table(*_verdict_table([v for v in report.intersectional() if v.variation == "baseline"])),
        "",
        "## Separation components",
        "",
        _md_table(["intersection", "group", "TPR", "FPR", "parent", "parent TPR", "parent FPR"],
                  [[r.intersection, r.group, _fmt(r.tpr), _fmt(r.fpr), f"{r.parent_attribute}={r.parent_level}",
                    _fmt(r.parent_tpr), _fmt(r.parent_fpr)] for r in report.separation]),
        "",
    ]
    if report.notes:
        parts += ["## Notes", ""] + [f"- {n}" for n in report.notes] + [""]
    return "\n".join(parts)
