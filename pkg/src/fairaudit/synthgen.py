"""Synthetic borrower populations with calibrated repayment rates and planted structure.

Repayment is Bernoulli(sigmoid(eta)) where eta is an intercept plus main effects of
the discretized sensitive levels plus pairwise interaction effects. Features are
class-conditional Gaussians per category (shift `signal` between defaulters and
repayers). A category may also load on the centred group logit (`proxy`); that is
how group membership leaks into the features even though the model never sees the
sensitive attributes.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import pandas as pd

from ._seeds import rng_for
from .tabular import Column, Dataset, Schema

ATTRIBUTES = ("gender", "age", "status", "single_parent", "children")
PRIVILEGED = {
    "gender": "male",
    "age": "aged",
    "status": "married",
    "single_parent": "no",
    "children": "none",
}
NON_MARRIED = ("single", "divorced", "widowed")
BLOCK = 10_000


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureGroup:
    category: str
    count: int
    signal: float
    proxy: float = 0.0
    missing_rate: float = 0.0


# Shares and effects are keyed by discretized level; interactions by "attrA|attrB"
# then "levelA|levelB".
@dataclass(frozen=True)
class GeneratorSpec:
    n: int = 50_000
    seed: int = 0
    gender: Mapping[str, float] = field(default_factory=lambda: {"female": 0.4, "male": 0.6})
    age: Mapping[str, float] = field(default_factory=lambda: {"young": 0.2, "aged": 0.8})
    status: Mapping[str, float] = field(
        default_factory=lambda: {"single": 0.55, "married": 0.30, "divorced": 0.135, "widowed": 0.015}
    )
    children: Mapping[str, float] = field(default_factory=lambda: {"none": 0.6, "1-2": 0.3, "3+": 0.1})
    # P(single parent | at least one child and not married)
    single_parent_rate: float = 0.5
    intercept: float = 0.0
    main: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    interactions: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    groups: tuple[FeatureGroup, ...] = ()
    # log-odds tilt of the employment level towards repayment
    employment_signal: float = 0.3

    def __post_init__(self):
        if self.n < 1:
            raise GeneratorError("n must be at least 1")
        for name in ("gender", "age", "status", "children"):
            shares = getattr(self, name)
            if abs(sum(shares.values()) - 1.0) > 1e-9:
                raise GeneratorError(f"{name} shares sum to {sum(shares.values())}, not 1")
            if min(shares.values()) < 0:
                raise GeneratorError(f"{name} shares must be non-negative")
        if set(self.age) != {"young", "aged"}:
            raise GeneratorError("age shares must cover exactly 'young' and 'aged'")
        if set(self.children) != {"none", "1-2", "3+"}:
            raise GeneratorError("children shares must cover 'none', '1-2', '3+'")
        if not 0 <= self.single_parent_rate <= 1:
            raise GeneratorError("single_parent_rate must lie in [0, 1]")
        for g in self.groups:
            if g.count < 1:
                raise GeneratorError(f"category {g.category!r} needs at least one feature")
        object.__setattr__(self, "groups", tuple(
            g if isinstance(g, FeatureGroup) else FeatureGroup(**g) for g in self.groups
        ))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [asdict(g) for g in self.groups]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise GeneratorError(f"unknown generator spec field(s) {sorted(unknown)}")
        d = dict(d)
        if "groups" in d:
            d["groups"] = tuple(FeatureGroup(**g) for g in d["groups"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "GeneratorSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


DEFAULT_GROUPS = (
    FeatureGroup("loan", 3, 0.25),
    FeatureGroup("financial", 3, 0.20, proxy=0.3),
    FeatureGroup("transaction_basic", 6, 0.15),
    FeatureGroup("transaction_category", 8, 0.12),
    FeatureGroup("credit_bureau", 4, 0.20, missing_rate=0.05),
    FeatureGroup("digital_footprint", 5, 0.15),
    FeatureGroup("user_agent", 3, 0.10),
    FeatureGroup("customer", 3, 0.15, proxy=0.3),
)

# Least-squares fit of the lattice expectation to the repayment rates quoted for the
# credit data (overall ~65%, single parents 59%, young single parents 52%, married with
# 1-2 children 68%, ...); see scripts/calibrate_defaults.py.
DEFAULT_INTERCEPT = 0.6193
DEFAULT_MAIN = {
    "gender": {"female": -0.0856},
    "age": {"young": 0.6472},
    "status": {"married": -0.1979, "divorced": -0.0207},
    "children": {"1-2": 0.2137, "3+": 0.1292},
    "single_parent": {"yes": -0.3289},
}
DEFAULT_INTERACTIONS = {
    "age|single_parent": {"young|yes": -0.3276},
    "age|status": {"young|married": -0.9848},
    "age|children": {"young|1-2": -0.9032},
    "status|children": {"married|1-2": 0.2989},
    "gender|status": {"female|married": 0.3442},
}


def default_spec(n: int = 50_000, seed: int = 0) -> GeneratorSpec:
    return GeneratorSpec(
        n=n,
        seed=seed,
        intercept=DEFAULT_INTERCEPT,
        main=DEFAULT_MAIN,
        interactions=DEFAULT_INTERACTIONS,
        groups=DEFAULT_GROUPS,
    )


VARIATION_GROUPS = (
    FeatureGroup("loan", 3, 0.25),
    FeatureGroup("financial", 3, 0.20),
    FeatureGroup("transaction_basic", 6, 0.18),
    FeatureGroup("transaction_category", 8, 0.14),
    FeatureGroup("credit_bureau", 4, 0.20, missing_rate=0.05),
    FeatureGroup("digital_footprint", 5, 0.22),
    FeatureGroup("user_agent", 3, 0.15),
    FeatureGroup("customer", 3, 0.15),
)


def variation_spec(n: int = 20_000, seed: int = 0) -> GeneratorSpec:
    """Default population whose bank-transaction and footprint groups each carry
    clearly incremental signal over the traditional categories."""
    return replace(default_spec(n, seed), groups=VARIATION_GROUPS)


MASKING_GROUPS = (
    FeatureGroup("loan", 3, 0.25),
    FeatureGroup("financial", 3, 0.20),
    FeatureGroup("transaction_basic", 4, 0.15),
    FeatureGroup("credit_bureau", 4, 0.20),
    FeatureGroup("digital_footprint", 3, 0.15),
    FeatureGroup("customer", 4, 0.0, proxy=0.8),
)
# Interaction strength per unit of tau, checked by Monte-Carlo runs of the default
# pipeline. The young-without-children term is solved so that young and aged borrowers
# have the same expected repayment rate, leaving the age marginal balanced.
MASKING_PER_TAU = {"young|none": 6.9, "young|1-2": -12.0, "young|3+": -16.0}


def masking_spec(tau: float = 0.1, n: int = 50_000, seed: int = 0, interaction: bool = True) -> GeneratorSpec:
    """Population where single attributes look fair but age x children does not.

    All main effects are zero. Young borrowers with children repay less and young
    borrowers without children repay more, balancing out across age. The customer
    features carry the gap, so the model under-approves young parents even among
    those who repay, while each single attribute dilutes or cancels the effect over
    its other members. `interaction=False` gives the matching null control.
    """
    if not 0 < tau < 1:
        raise GeneratorError("tau must lie in (0, 1)")
    effects = {k: v * tau for k, v in MASKING_PER_TAU.items()} if interaction else {}
    return GeneratorSpec(
        n=n,
        seed=seed,
        age={"young": 0.15, "aged": 0.85},
        status={"single": 0.55, "married": 0.30, "divorced": 0.135, "widowed": 0.015},
        children={"none": 0.7, "1-2": 0.2, "3+": 0.1},
        intercept=math.log(0.65 / 0.35),
        main={},
        interactions={"age|children": effects} if effects else {},
        groups=MASKING_GROUPS,
        employment_signal=0.0,
    )


# ---------------------------------------------------------------- logit model

def _effect(spec: GeneratorSpec, levels: Mapping[str, np.ndarray | str]):
    eta = spec.intercept
    for attr, table in spec.main.items():
        for level, coef in table.items():
            eta = eta + coef * (np.asarray(levels[attr]) == level)
    for pair, table in spec.interactions.items():
        a, b = pair.split("|")
        for combo, coef in table.items():
            la, lb = combo.split("|")
            eta = eta + coef * ((np.asarray(levels[a]) == la) & (np.asarray(levels[b]) == lb))
    return eta


def _sp_prob(spec: GeneratorSpec, status: str, children: str) -> float:
    return spec.single_parent_rate if children != "none" and status in NON_MARRIED else 0.0


def lattice(spec: GeneratorSpec, drop_widowed: bool = True) -> list[tuple[dict, float, float]]:
    """Every attribute cell with its probability and its repayment probability."""
    cells = []
    for g, a, s, c in itertools.product(spec.gender, spec.age, spec.status, spec.children):
        if drop_widowed and s == "widowed":
            continue
        p_sp = _sp_prob(spec, s, c)
        for sp, q in (("yes", p_sp), ("no", 1 - p_sp)):
            w = spec.gender[g] * spec.age[a] * spec.status[s] * spec.children[c] * q
            if w == 0:
                continue
            levels = {"gender": g, "age": a, "status": s, "children": c, "single_parent": sp}
            eta = float(_effect(spec, levels))
            cells.append((levels, w, 1.0 / (1.0 + math.exp(-eta))))
    return cells


def expected_rate(spec: GeneratorSpec, where: Callable[[dict], bool] | Mapping[str, str] | None = None) -> float:
    """Closed-form repayment rate among (non-widowed) cells matching `where`."""
    if isinstance(where, Mapping):
        cond = dict(where)
        where = lambda lv: all(lv[k] == v for k, v in cond.items())  # noqa: E731
    num = den = 0.0
    for levels, w, p in lattice(spec):
        if where is None or where(levels):
            num += w * p
            den += w
    if den == 0:
        raise GeneratorError("condition matches no cell with positive probability")
    return num / den


# ---------------------------------------------------------------- sampling

def _draw(rng: np.random.Generator, shares: Mapping[str, float], size: int) -> np.ndarray:
    levels = list(shares)
    probs = np.array([shares[k] for k in levels], dtype=np.float64)
    return np.asarray(levels, dtype=object)[rng.choice(len(levels), size=size, p=probs / probs.sum())]


def _block(spec: GeneratorSpec, start: int, size: int) -> dict[str, np.ndarray]:
    rng = rng_for(spec.seed, "synth", start // BLOCK)
    gender = _draw(rng, spec.gender, size)
    age_lvl = _draw(rng, spec.age, size)
    status = _draw(rng, spec.status, size)
    kids_lvl = _draw(rng, spec.children, size)
    sp_p = np.where((kids_lvl != "none") & np.isin(status, NON_MARRIED), spec.single_parent_rate, 0.0)
    single_parent = np.where(rng.random(size) < sp_p, "yes", "no").astype(object)

    age = np.where(age_lvl == "young", rng.integers(18, 25, size), rng.integers(25, 71, size))
    kids = np.select(
        [kids_lvl == "none", kids_lvl == "1-2"], [0, rng.integers(1, 3, size)], rng.integers(3, 7, size)
    )
    levels = {"gender": gender, "age": age_lvl, "status": status, "children": kids_lvl, "single_parent": single_parent}
    eta = np.broadcast_to(np.asarray(_effect(spec, levels), dtype=np.float64), (size,))
    y = (rng.random(size) < 1.0 / (1.0 + np.exp(-eta))).astype(np.int64)
    centred = eta - spec.intercept

    out = {
        "gender": gender, "age": age.astype(np.float64), "status": status,
        "single_parent": single_parent, "children": kids.astype(np.float64),
    }
    for g in spec.groups:
        for j in range(g.count):
            x = g.signal * y + g.proxy * centred + rng.standard_normal(size)
            if g.missing_rate > 0:
                x = np.where(rng.random(size) < g.missing_rate, np.nan, x)
            out[f"{g.category}_{j + 1}"] = np.round(x, 6)
    tilt = spec.employment_signal * (2 * y - 1)
    logits = np.stack([tilt, np.zeros(size), -tilt], axis=1) + np.log([0.6, 0.25, 0.15])
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(size)[:, None]
    pick = (u > np.cumsum(probs, axis=1)).sum(axis=1)
    out["employment"] = np.asarray(["employed", "self_employed", "unemployed"], dtype=object)[np.minimum(pick, 2)]
    out["repaid"] = y
    return out


def schema_for(spec: GeneratorSpec) -> Schema:
    cols = [
        Column("gender", "categorical", "sensitive", privileged="male", levels=tuple(spec.gender)),
        Column("age", "numeric", "sensitive", privileged="aged"),
        Column("status", "categorical", "sensitive", privileged="married", levels=tuple(spec.status)),
        Column("single_parent", "categorical", "sensitive", privileged="no", levels=("yes", "no")),
        Column("children", "numeric", "sensitive", privileged="none"),
    ]
    for g in spec.groups:
        cols += [Column(f"{g.category}_{j + 1}", "numeric", "feature", category=g.category) for j in range(g.count)]
    cols.append(Column("employment", "categorical", "feature", category="customer",
                       levels=("employed", "self_employed", "unemployed")))
    cols.append(Column("repaid", "numeric", "target"))
    return Schema(tuple(cols))


def generate(spec: GeneratorSpec) -> Dataset:
    """Sample `spec.n` independent borrowers (raw age and children counts, widowed kept)."""
    parts = [_block(spec, start, min(BLOCK, spec.n - start)) for start in range(0, spec.n, BLOCK)]
    schema = schema_for(spec)
    frame = pd.DataFrame({name: np.concatenate([p[name] for p in parts]) for name in schema.names})
    for name in ("gender", "status", "single_parent", "employment"):
        frame[name] = frame[name].astype(object)
    if spec.n >= 100 and frame["repaid"].nunique() < 2:
        raise GeneratorError("degenerate spec: every generated label is identical")
    return Dataset(schema, frame)
