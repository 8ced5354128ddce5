"""Fit the default generator's logit coefficients to published repayment rates.

Prints the intercept, main effects and interactions to paste into synthgen.py.
The fit works on the closed-form lattice expectation, so it is exact and fast.
"""

from dataclasses import replace

import numpy as np
from scipy.optimize import least_squares

from fairaudit.synthgen import DEFAULT_GROUPS, GeneratorSpec, expected_rate

MAIN = [
    ("gender", "female"), ("age", "young"), ("status", "married"), ("status", "divorced"),
    ("children", "1-2"), ("children", "3+"), ("single_parent", "yes"),
]
INTER = [
    ("age|single_parent", "young|yes"), ("age|status", "young|married"), ("age|children", "young|1-2"),
    ("status|children", "married|1-2"), ("gender|status", "female|married"),
]

# (condition, target rate, weight)
TARGETS = [
    ({}, 0.65, 10),
    ({"single_parent": "yes"}, 0.59, 3),
    ({"single_parent": "no"}, 0.65, 3),
    ({"age": "young", "single_parent": "yes"}, 0.52, 5),
    ({"age": "young", "status": "married"}, 0.52, 3),
    ({"age": "young", "children": "1-2"}, 0.52, 3),
    ({"status": "married", "children": "1-2"}, 0.68, 5),
    ({"status": "married", "gender": "female"}, 0.67, 2),
    ({"age": "aged", "status": "married"}, 0.66, 2),
    ({"single_parent": "no", "gender": "female"}, 0.66, 1),
    ({"children": "none", "gender": "female"}, 0.66, 1),
] + [({a: lv}, 0.65, 1) for a, lv in [
    ("gender", "female"), ("gender", "male"), ("age", "young"), ("age", "aged"),
    ("status", "single"), ("status", "married"), ("status", "divorced"),
    ("children", "none"), ("children", "1-2"), ("children", "3+"),
]]


def build(theta, digits=None):
    r = (lambda v: round(float(v), digits)) if digits else float
    main, inter = {}, {}
    for (attr, lv), v in zip(MAIN, theta[1 : 1 + len(MAIN)]):
        main.setdefault(attr, {})[lv] = r(v)
    for (pair, combo), v in zip(INTER, theta[1 + len(MAIN) :]):
        inter.setdefault(pair, {})[combo] = r(v)
    return GeneratorSpec(intercept=r(theta[0]), main=main, interactions=inter, groups=DEFAULT_GROUPS)


def residuals(theta):
    fit = [w * (expected_rate(build(theta), cond) - t) for cond, t, w in TARGETS]
    # mild ridge keeps unconstrained coefficients near zero
    return np.concatenate([fit, 0.01 * theta[1:]])


if __name__ == "__main__":
    theta0 = np.zeros(1 + len(MAIN) + len(INTER))
    theta0[0] = np.log(0.65 / 0.35)
    fit = least_squares(residuals, theta0)
    spec = build(fit.x, digits=4)
    print("intercept", spec.intercept)
    print("main", spec.main)
    print("interactions", spec.interactions)
    for cond, t, _ in TARGETS:
        print(f"{str(cond):55s} target {t:.2f} fitted {expected_rate(spec, cond):.4f}")
