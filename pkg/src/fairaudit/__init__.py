"""Fairness audits of binary credit classifiers at the level of single sensitive
attributes and their two-way intersections."""

from .audit import (
    AuditReport,
    BootstrapSummary,
    GroupComparison,
    VariationSpec,
    bootstrap_audit,
    decompose_separation,
    enumerate_comparisons,
    render_report,
    run_audit,
    run_variations,
    ttest,
)
from .config import RunConfig
from .fairmetrics import aod, confusion, disparate_impact, judge, prp, spd
from .learner import GbmModel, HyperParams, run_protocol, train_gbm
from .tabular import Dataset, Schema, load_csv

__version__ = "0.1.0"

__all__ = [
    "AuditReport",
    "BootstrapSummary",
    "Dataset",
    "GbmModel",
    "GroupComparison",
    "HyperParams",
    "RunConfig",
    "Schema",
    "VariationSpec",
    "aod",
    "bootstrap_audit",
    "confusion",
    "decompose_separation",
    "disparate_impact",
    "enumerate_comparisons",
    "judge",
    "load_csv",
    "prp",
    "render_report",
    "run_audit",
    "run_protocol",
    "run_variations",
    "spd",
    "train_gbm",
    "ttest",
]
