"""Group confusion statistics and the independence / separation / sufficiency disparities.

All disparities are signed unprivileged-minus-privileged, so zero is parity and the
sign tells which group is favoured. The favourable outcome is a predicted 1 (loan
granted).

Rates whose denominator is zero are undefined. The scalar functions raise
``UndefinedMetricError`` for them; the batch functions return NaN so callers can
exclude and count those cases instead of reading them as parity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

CRITERIA = ("independence", "separation", "sufficiency")
# metric used to judge each criterion
CRITERION_METRIC = {"independence": "spd", "separation": "aod", "sufficiency": "prp"}
METRICS = ("spd", "aod", "prp", "eopp", "pred_eq")
DEFAULT_THRESHOLD = 0.1


class UndefinedMetricError(ValueError):
    """A rate needed by a metric has a zero denominator."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.fp + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )

    def rates(self) -> "RateSet":
        return RateSet.from_counts(self)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class RateSet:
    """Per-group rates; None where the denominator is zero."""

    tpr: float | None
    fpr: float | None
    fnr: float | None
    ppv: float | None
    ppr: float | None

    @classmethod
    def from_counts(cls, c: ConfusionCounts) -> "RateSet":
        return cls(
            tpr=_ratio(c.tp, c.tp + c.fn),
            fpr=_ratio(c.fp, c.fp + c.tn),
            fnr=_ratio(c.fn, c.tp + c.fn),
            ppv=_ratio(c.tp, c.tp + c.fp),
            ppr=_ratio(c.tp + c.fp, c.total),
        )


def confusion(pred, truth, mask=None) -> ConfusionCounts:
    """Confusion counts over the rows selected by `mask` (all rows when None)."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"pred and truth lengths differ: {pred.shape} vs {truth.shape}")
    if mask is not None:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != pred.shape:
            raise ValueError("mask length differs from predictions")
        pred, truth = pred[mask], truth[mask]
    if pred.size == 0:
        raise ValueError("group mask selects no rows")
    return ConfusionCounts(
        tp=int(np.sum(pred & truth)),
        fp=int(np.sum(pred & ~truth)),
        tn=int(np.sum(~pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
    )


def _need(rates: RateSet, *names: str) -> list[float]:
    out = []
    for name in names:
        v = getattr(rates, name)
        if v is None:
            raise UndefinedMetricError(f"{name.upper()} undefined (zero denominator)")
        out.append(v)
    return out


def spd(unpriv: RateSet, priv: RateSet) -> float:
    """Statistical parity difference: PPR_u - PPR_p."""
    (u,) = _need(unpriv, "ppr")
    (p,) = _need(priv, "ppr")
    return u - p


def separation_components(unpriv: RateSet, priv: RateSet) -> dict[str, float]:
    """Equality-of-opportunity gap (TPR) and predictive-equality gap (FPR)."""
    tpr_u, fpr_u = _need(unpriv, "tpr", "fpr")
    tpr_p, fpr_p = _need(priv, "tpr", "fpr")
    return {"eopp": tpr_u - tpr_p, "pred_eq": fpr_u - fpr_p}


def aod(unpriv: RateSet, priv: RateSet, strict_as_printed: bool = False) -> float:
    """Average odds difference, 0.5 * (FPR gap + TPR gap).

    With `strict_as_printed` only the FPR gap is halved, i.e.
    0.5 * FPR gap + TPR gap.
    """
    comp = separation_components(unpriv, priv)
    if strict_as_printed:
        return 0.5 * comp["pred_eq"] + comp["eopp"]
    return 0.5 * (comp["pred_eq"] + comp["eopp"])


def prp(unpriv: RateSet, priv: RateSet) -> float:
    """Predictive rate parity: PPV_u - PPV_p."""
    (u,) = _need(unpriv, "ppv")
    (p,) = _need(priv, "ppv")
    return u - p


def disparate_impact(rates: Mapping[str, float | None]) -> tuple[float, bool]:
    """Smallest selection rate relative to the largest, and whether it clears 80%.

    The comparison allows 1e-12 of rounding slack so that an exact 80% ratio such as
    0.32 / 0.40 passes.
    """
    defined = {g: r for g, r in rates.items() if r is not None and not math.isnan(r)}
    if len(defined) < 2:
        raise UndefinedMetricError("disparate impact needs at least two groups with a PPR")
    top = max(defined.values())
    if top == 0:
        raise UndefinedMetricError("no group has any favourable prediction")
    ratio = min(defined.values()) / top
    return ratio, ratio >= 0.8 - 1e-12


@dataclass(frozen=True)
class FairnessVerdict:
    criterion: str
    value: float
    threshold: float
    fair: bool
    comparison: tuple[str, str] | None = None

    @property
    def direction(self) -> str:
        if self.value < 0:
            return "favours privileged"
        if self.value > 0:
            return "favours unprivileged"
        return "parity"


def judge(
    value: float,
    criterion: str,
    threshold: float = DEFAULT_THRESHOLD,
    comparison: tuple[str, str] | None = None,
) -> FairnessVerdict:
    """Fair iff |value| <= threshold; both directions of bias count."""
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    return FairnessVerdict(criterion, value, threshold, abs(value) <= threshold, comparison)


# Batch versions over count arrays of shape (..., 4) laid out as (tp, fp, tn, fn).
# Used by the bootstrap; they share the formulas above but return NaN when undefined.

def _div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.full(np.broadcast(num, den).shape, np.nan)
    np.divide(num, den, out=out, where=den > 0)
    return out


def batch_rates(counts: np.ndarray) -> dict[str, np.ndarray]:
    counts = np.asarray(counts)
    tp, fp, tn, fn = (counts[..., i] for i in range(4))
    return {
        "tpr": _div(tp, tp + fn),
        "fpr": _div(fp, fp + tn),
        "fnr": _div(fn, tp + fn),
        "ppv": _div(tp, tp + fp),
        "ppr": _div(tp + fp, tp + fp + tn + fn),
    }


def batch_metrics(
    unpriv_counts: np.ndarray, priv_counts: np.ndarray, strict_as_printed: bool = False
) -> dict[str, np.ndarray]:
    """All pairwise disparities for aligned count arrays; NaN where undefined."""
    u = batch_rates(unpriv_counts)
    p = batch_rates(priv_counts)
    eopp = u["tpr"] - p["tpr"]
    pred_eq = u["fpr"] - p["fpr"]
    avg = 0.5 * pred_eq + eopp if strict_as_printed else 0.5 * (pred_eq + eopp)
    return {
        "spd": u["ppr"] - p["ppr"],
        "aod": avg,
        "prp": u["ppv"] - p["ppv"],
        "eopp": eopp,
        "pred_eq": pred_eq,
    }


def counts_array(c: ConfusionCounts) -> np.ndarray:
    return np.array([c.tp, c.fp, c.tn, c.fn], dtype=np.int64)
