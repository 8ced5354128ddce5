import logging
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairaudit import synthgen
from fairaudit.attrib import (
    Attribution,
    aggregate,
    explain_sample,
    expected_value,
    shap_values,
    tree_shap,
)
from fairaudit.learner import FeatureEncoder, EncodedColumn, GbmModel, HyperParams, Tree, fit_matrix, train_gbm
from fairaudit.prep import impute

from oracles import brute_shapley


def model_of(trees, n_features, base=0.0):
    enc = FeatureEncoder(tuple(EncodedColumn(f"x{j}", f"x{j}", "c") for j in range(n_features)))
    return GbmModel(list(trees), 0.1, base, HyperParams(), enc, [])


def random_model(seed, p, depth, n_trees, n=120):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    y = (X @ rng.normal(size=p) + rng.normal(size=n) > 0).astype(int)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    hp = HyperParams(n_rounds=n_trees, max_depth=depth, learning_rate=0.3, min_child_weight=0.0)
    return fit_matrix(X, y, hp, seed), X


class TestSmallCases:
    def test_single_leaf(self):
        model = model_of([Tree.leaf(0.7, 10.0)], 2)
        a = tree_shap(model, [1.0, 2.0])
        assert np.all(a.per_feature == 0)
        assert a.base_value == pytest.approx(0.7)

    def test_stump_half_credit(self):
        stump = Tree(
            feature=np.array([0, -1, -1]), threshold=np.array([0.0, 0, 0]),
            left=np.array([1, -1, -1]), right=np.array([2, -1, -1]),
            value=np.array([0.0, 0.0, 1.0]), cover=np.array([10.0, 5.0, 5.0]),
        )
        a = tree_shap(model_of([stump], 1), [3.0], row_ref=4)
        assert a.per_feature[0] == pytest.approx(0.5, abs=1e-15)
        assert a.base_value == pytest.approx(0.5)
        assert a.row_ref == 4

    def test_missing_feature_rejected(self):
        model = model_of([Tree.leaf(0.0, 1.0)], 2)
        with pytest.raises(ValueError, match="x1"):
            tree_shap(model, [0.0, np.nan])
        with pytest.raises(ValueError):
            shap_values(model, np.zeros((1, 3)))


class TestProperties:
    def test_local_accuracy(self):
        model, X = random_model(0, 6, 5, 40, n=500)
        phi, base = shap_values(model, X)
        assert np.max(np.abs(base + phi.sum(axis=1) - model.raw_matrix(X))) < 1e-9

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3), st.integers(1, 5))
    def test_matches_exhaustive_enumeration(self, seed, p, depth, n_trees):
        model, X = random_model(seed, p, depth, n_trees, n=60)
        phi, _ = shap_values(model, X[:5])
        for i in range(5):
            ref = brute_shapley(model.trees, X[i])
            assert np.max(np.abs(phi[i] - ref)) < 1e-9

    def test_dummy_feature_gets_zero(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(200, 3))
        X[:, 2] = 1.0  # constant, so never split on
        y = (X[:, 0] > 0).astype(int)
        model = fit_matrix(X, y, HyperParams(n_rounds=20), 0)
        phi, _ = shap_values(model, X)
        assert np.all(phi[:, 2] == 0.0)

    def test_symmetry_of_duplicated_trees(self):
        model, X = random_model(5, 1, 3, 4)
        # the same trees once on column 0 and once on an identical column 1
        mirrored = []
        for t in model.trees:
            d = t.to_dict()
            d["feature"] = [1 if f == 0 else f for f in d["feature"]]
            mirrored.append(Tree.from_dict(d))
        both = model_of(model.trees + mirrored, 2)
        X2 = np.hstack([X, X])
        phi, _ = shap_values(both, X2)
        assert np.max(np.abs(phi[:, 0] - phi[:, 1])) < 1e-9

    def test_expected_value_matches_cover_weighting(self):
        model, X = random_model(6, 3, 3, 5)
        phi, base = shap_values(model, X[:1])
        assert base == pytest.approx(expected_value(model))
        assert base == pytest.approx(model.base_score + sum(t.expected_value() for t in model.trees))


class TestAggregate:
    def test_sum_and_mean(self):
        attrs = [Attribution(np.array([0.2, -0.4]), 0.0, 0)]
        imp = aggregate(attrs, ["a", "b"], ["loan", "loan"])
        assert imp.per_category["loan"] == pytest.approx((0.6, 0.3))

    def test_zero_feature(self):
        phi = np.array([[0.0, 1.0], [0.0, -3.0]])
        imp = aggregate(phi, ["a", "b"], {"a": "loan", "b": "customer"})
        assert imp.per_feature["a"] == 0.0
        assert imp.per_category["loan"] == (0.0, 0.0)
        assert imp.per_category["customer"] == (2.0, 2.0)

    def test_category_sums_add_to_total(self):
        rng = np.random.default_rng(0)
        phi = rng.normal(size=(50, 6))
        cats = ["a", "b", "a", "c", "b", "a"]
        imp = aggregate(phi, [f"f{j}" for j in range(6)], cats)
        total = sum(s for s, _ in imp.per_category.values())
        assert total == pytest.approx(sum(imp.per_feature.values()), abs=1e-9)

    def test_unmapped_feature(self):
        with pytest.raises(ValueError, match="no category"):
            aggregate(np.zeros((1, 2)), ["a", "b"], {"a": "loan"})

    def test_csv_export(self, tmp_path):
        imp = aggregate(np.array([[1.0, 2.0]]), ["a", "b"], ["loan", "customer"])
        imp.write_csv(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "category,sum,mean"
        assert lines[1:] == ["customer,2.0,2.0", "loan,1.0,1.0"]

    def test_planted_category_ranks_first(self):
        groups = tuple(
            synthgen.FeatureGroup(g.category, g.count, 0.6 if g.category == "transaction_category" else 0.0)
            for g in synthgen.DEFAULT_GROUPS
        )
        spec = replace(synthgen.default_spec(4000, seed=2), groups=groups, employment_signal=0.0)
        ds = impute(synthgen.generate(spec))
        model = train_gbm(ds, HyperParams(n_rounds=40, max_depth=3), seed=0)
        imp = explain_sample(model, model.encoder.transform(ds), 500, seed=1)
        assert imp.ranked("sum")[0] == "transaction_category"
        assert imp.ranked("mean")[0] == "transaction_category"

    def test_sample_clamped_with_warning(self, caplog):
        model, X = random_model(7, 2, 2, 3, n=40)
        with caplog.at_level(logging.WARNING):
            imp = explain_sample(model, X, 1000, seed=0)
        assert "exceeds" in caplog.text
        assert set(imp.per_feature) == {"x0", "x1"}
