"""Independent reference computations used to cross-check the package.

These deliberately avoid the package's code paths: metrics are counted row by row with
exact fractions, Shapley values come from enumerating every coalition, and the Welch
statistic is written out from its textbook definition.
"""

from fractions import Fraction
from itertools import combinations
from math import factorial, sqrt


def _prob(event, given):
    """P(event | given) over parallel boolean lists, exact; None if `given` is empty."""
    den = sum(1 for g in given if g)
    if den == 0:
        return None
    return Fraction(sum(1 for e, g in zip(event, given) if e and g), den)


def group_rates(pred, truth, in_group):
    """Rates of one group computed as conditional probabilities."""
    pos_pred = [p == 1 for p in pred]
    pos_true = [t == 1 for t in truth]
    neg_true = [t == 0 for t in truth]
    return {
        "ppr": _prob(pos_pred, in_group),
        "tpr": _prob(pos_pred, [g and t for g, t in zip(in_group, pos_true)]),
        "fpr": _prob(pos_pred, [g and t for g, t in zip(in_group, neg_true)]),
        "ppv": _prob(pos_true, [g and p for g, p in zip(in_group, pos_pred)]),
    }


def _diff(a, b):
    return None if a is None or b is None else a - b


def metric_oracle(pred, truth, group, unpriv, priv):
    """All pairwise disparities between two groups as exact fractions (None = undefined)."""
    u = group_rates(pred, truth, [g == unpriv for g in group])
    p = group_rates(pred, truth, [g == priv for g in group])
    eopp = _diff(u["tpr"], p["tpr"])
    pred_eq = _diff(u["fpr"], p["fpr"])
    return {
        "spd": _diff(u["ppr"], p["ppr"]),
        "prp": _diff(u["ppv"], p["ppv"]),
        "eopp": eopp,
        "pred_eq": pred_eq,
        "aod": None if eopp is None or pred_eq is None else (eopp + pred_eq) / 2,
    }


def di_oracle(pred, group):
    """Lowest selection rate over the highest across all groups present."""
    rates = []
    for g in sorted(set(group)):
        members = [p for p, gg in zip(pred, group) if gg == g]
        rates.append(Fraction(sum(members), len(members)))
    hi = max(rates)
    return None if hi == 0 else min(rates) / hi


def tree_conditional(tree, x, known):
    """E[f(X) | X_S = x_S] using node covers for the unknown features."""

    def walk(node):
        f = tree.feature[node]
        if f < 0:
            return tree.value[node]
        left, right = tree.left[node], tree.right[node]
        if f in known:
            return walk(left if x[f] <= tree.threshold[node] else right)
        c = tree.cover[node]
        return (tree.cover[left] * walk(left) + tree.cover[right] * walk(right)) / c

    return walk(0)


def brute_shapley(trees, x):
    """Exact Shapley values of the tree-sum by enumerating all coalitions."""
    p = len(x)
    phi = [0.0] * p

    def value(subset):
        return sum(tree_conditional(t, x, set(subset)) for t in trees)

    for i in range(p):
        others = [j for j in range(p) if j != i]
        for size in range(p):
            w = factorial(size) * factorial(p - size - 1) / factorial(p)
            for s in combinations(others, size):
                phi[i] += w * (value(s + (i,)) - value(s))
    return phi


def welch(a, b):
    """Welch t statistic and Welch-Satterthwaite degrees of freedom."""
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((v - ma) ** 2 for v in a) / (na - 1)
    vb = sum((v - mb) ** 2 for v in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = (ma - mb) / sqrt(se2)
    df = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return t, df
