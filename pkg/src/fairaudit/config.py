"""Resolved run configuration shared by the CLI and the audit pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .fairmetrics import CRITERIA, DEFAULT_THRESHOLD
from .learner import HyperParams

SEARCHES = ("quasi_random", "surrogate")
AOD_MODES = ("average", "strict")
# execution settings that must not change results, so they stay out of the report echo
NON_ECHOED = ("threads", "out")


class ConfigError(ValueError):
    pass


def _default_thresholds() -> dict[str, float]:
    return {c: DEFAULT_THRESHOLD for c in CRITERIA}


@dataclass
class RunConfig:
    data: str | None = None
    schema: str | None = None
    out: str | None = None
    seed: int | None = None
    thresholds: dict[str, float] = field(default_factory=_default_thresholds)
    bootstrap: int = 500
    cv_k: int = 5
    tuning_budget: int = 30
    search: str = "quasi_random"
    variations: list[str] = field(default_factory=lambda: ["baseline"])
    max_depth: int = 2
    min_group: int = 50
    train_frac: float = 0.7
    downsample_ratio: float = 1.0
    decision_threshold: float = 0.5
    corr_threshold: float = 0.7
    importance_cap: int = 30
    forest_trees: int = 100
    shap_sample: int = 2000
    aod_mode: str = "average"
    hyperparams: dict | None = None
    threads: int = 1

    def validate(self) -> "RunConfig":
        from .audit import VARIATION_NAMES

        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.seed is None or isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        unknown = set(self.thresholds) - set(CRITERIA)
        need(not unknown, f"unknown criteria in thresholds: {sorted(unknown)}")
        self.thresholds = {**_default_thresholds(), **{k: float(v) for k, v in self.thresholds.items()}}
        need(all(0 < v < 1 for v in self.thresholds.values()), "thresholds must lie in (0, 1)")
        need(self.bootstrap >= 1, "bootstrap must be at least 1")
        need(self.cv_k >= 2, "cv_k must be at least 2")
        need(self.tuning_budget >= 1, "tuning_budget must be at least 1")
        need(self.search in SEARCHES, f"search must be one of {SEARCHES}")
        bad = [v for v in self.variations if v not in VARIATION_NAMES]
        need(not bad, f"unknown variations {bad}; choose from {list(VARIATION_NAMES)}")
        need(self.max_depth in (1, 2), "max_depth must be 1 or 2")
        need(self.min_group >= 1, "min_group must be at least 1")
        need(0 < self.train_frac < 1, "train_frac must lie in (0, 1)")
        need(self.downsample_ratio > 0, "downsample_ratio must be positive")
        need(0 < self.decision_threshold < 1, "decision_threshold must lie in (0, 1)")
        need(0 < self.corr_threshold <= 1, "corr_threshold must lie in (0, 1]")
        need(self.importance_cap >= 1, "importance_cap must be at least 1")
        need(self.forest_trees >= 1, "forest_trees must be at least 1")
        need(self.shap_sample >= 1, "shap_sample must be at least 1")
        need(self.aod_mode in AOD_MODES, f"aod_mode must be one of {AOD_MODES}")
        need(self.threads >= 1, "threads must be at least 1")
        if self.hyperparams is not None:
            try:
                HyperParams(**self.hyperparams)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid hyperparams: {exc}") from exc
        return self

    def fixed_params(self) -> HyperParams | None:
        return None if self.hyperparams is None else HyperParams(**self.hyperparams)

    def to_dict(self) -> dict:
        return asdict(self)

    def echo(self) -> dict:
        d = self.to_dict()
        for k in NON_ECHOED:
            d.pop(k)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)
