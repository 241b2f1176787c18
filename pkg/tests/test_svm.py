import json

import numpy as np
import pytest
from scipy import optimize

from haptix.core import CLASS_ORDER, ComplianceClass
from haptix.errors import DimensionMismatch, SingleClassData
from haptix.preprocess import FeatureMatrix
from haptix.svm import (
    SvmModel,
    flatten,
    hinge_objective,
    load_model,
    model_from_dict,
    model_to_dict,
    predict_svm,
    save_model,
    train_svm,
    unflatten,
)


def blobs(rng, centers, per_class=20, spread=0.4):
    X, y = [], []
    for label, c in centers.items():
        X.append(rng.normal(c, spread, size=(per_class, len(c))))
        y.extend([label] * per_class)
    return np.concatenate(X), y


class TestFlatten:
    def test_column_major_layout(self):
        values = np.array([[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]])
        fm = FeatureMatrix(values=values, channel_names=("fx", "fz"))
        vec = flatten(fm)
        np.testing.assert_array_equal(vec, [1, 2, 3, 4, 5, 6])
        # element n_steps * j + i is grid step i of channel j
        n = values.shape[0]
        for i in range(3):
            for j in range(2):
                assert vec[n * j + i] == values[i, j]

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=(64, 5))
        np.testing.assert_array_equal(unflatten(flatten(values), 5), values)

    def test_unflatten_checks_divisibility(self):
        with pytest.raises(ValueError):
            unflatten(np.zeros(10), 3)

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            flatten(np.zeros(12))


class TestHingeObjective:
    def test_matches_direct_summation(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(17, 4))
        ybin = np.where(rng.random(17) < 0.5, 1.0, -1.0)
        w = rng.normal(size=4)
        b = 0.3
        C = 2.5
        total = 0.0
        for i in range(17):
            total += max(0.0, 1.0 - ybin[i] * (float(X[i] @ w) + b))
        expected = total / 17 + float(w @ w) / (2 * C * 17)
        assert hinge_objective(w, b, X, ybin, C) == pytest.approx(expected,
                                                                  rel=1e-12)

    def test_zero_weights_cost_one(self):
        X = np.zeros((5, 2))
        ybin = np.ones(5)
        assert hinge_objective(np.zeros(2), 0.0, X, ybin, 1.0) == 1.0


class TestTraining:
    def test_separable_two_class(self):
        rng = np.random.default_rng(2)
        X, y = blobs(rng, {0: (2.0, 2.0), 1: (-2.0, -2.0)})
        model, hist = train_svm(X, y, C=1.0, epochs=50, seed=0,
                                return_history=True)
        preds = [predict_svm(model, x)[0] for x in X]
        assert preds == y
        for c in (0, 1):
            assert hist[c][-1] < hist[c][0]
            assert hist[c][-1] < 0.5

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        X, y = blobs(rng, {0: (1.5, 0.0), 1: (-1.5, 0.0)}, per_class=10)
        a = train_svm(X, y, epochs=20, seed=7)
        b = train_svm(X, y, epochs=20, seed=7)
        c = train_svm(X, y, epochs=20, seed=8)
        np.testing.assert_array_equal(a.W, b.W)
        np.testing.assert_array_equal(a.b, b.b)
        assert not np.array_equal(a.W, c.W)

    def test_near_optimal_objective(self):
        # Independent check of the optimizer itself: the trained per-class
        # objective must come close to a general-purpose minimizer's value.
        rng = np.random.default_rng(4)
        X, y = blobs(rng, {0: (1.0, 0.5), 1: (-1.0, -0.5)}, per_class=15,
                     spread=0.8)
        C = 2.0
        model = train_svm(X, y, C=C, epochs=400, seed=0)
        ybin = np.where(np.array(y) == 0, 1.0, -1.0)
        ours = hinge_objective(model.W[0], float(model.b[0]), X, ybin, C)

        def f(p):
            return hinge_objective(p[:2], p[2], X, ybin, C)

        ref = min(
            optimize.minimize(f, x0, method="Powell").fun
            for x0 in (np.zeros(3), np.array([1.0, 0.5, 0.0]))
        )
        assert ours <= ref * 1.2 + 1e-3

    def test_four_class_compliance_labels(self):
        rng = np.random.default_rng(5)
        centers = {
            ComplianceClass.HARD_SKIN: (3.0, 0.0),
            ComplianceClass.HARD: (0.0, 3.0),
            ComplianceClass.MEDIUM: (-3.0, 0.0),
            ComplianceClass.SOFT: (0.0, -3.0),
        }
        X, y = blobs(rng, centers, per_class=15)
        model = train_svm(X, y, epochs=60, seed=1)
        assert model.classes == CLASS_ORDER
        hits = sum(predict_svm(model, x)[0] is lab for x, lab in zip(X, y))
        assert hits / len(y) >= 0.95

    def test_explicit_class_order_respected(self):
        rng = np.random.default_rng(6)
        X, y = blobs(rng, {"a": (2.0, 0.0), "b": (-2.0, 0.0)}, per_class=8)
        model = train_svm(X, y, epochs=30, classes=("b", "a"))
        assert model.classes == ("b", "a")
        # scores come back aligned with model.classes
        pred, scores = predict_svm(model, np.array([-2.0, 0.0]))
        assert pred == "b"
        assert scores[0] > scores[1]

    def test_single_class_rejected(self):
        X = np.zeros((4, 2))
        with pytest.raises(SingleClassData):
            train_svm(X, ["a", "a", "a", "a"])

    def test_parameter_validation(self):
        X = np.eye(2)
        y = ["a", "b"]
        with pytest.raises(ValueError):
            train_svm(X, y, C=0.0)
        with pytest.raises(ValueError):
            train_svm(X, y, epochs=0)
        with pytest.raises(ValueError):
            train_svm(X, ["a"])
        with pytest.raises(ValueError):
            train_svm(X, y, classes=("a", "c"))

    def test_label_outside_classes_rejected(self):
        with pytest.raises(ValueError):
            train_svm(np.eye(3), ["a", "b", "z"], classes=("a", "b"))


class TestPredict:
    def test_tie_breaks_to_first_class(self):
        model = SvmModel(W=np.zeros((4, 2)), b=np.zeros(4), C=1.0)
        pred, scores = predict_svm(model, np.ones(2))
        assert pred is ComplianceClass.HARD_SKIN
        assert np.all(scores == 0.0)

    def test_positive_score_scaling_keeps_argmax(self):
        rng = np.random.default_rng(8)
        model = SvmModel(W=rng.normal(size=(4, 3)), b=rng.normal(size=4),
                         C=1.0)
        for alpha in (0.01, 1.0, 250.0):
            scaled = SvmModel(W=alpha * model.W, b=alpha * model.b, C=1.0)
            for _ in range(20):
                x = rng.normal(size=3)
                assert predict_svm(model, x)[0] is predict_svm(scaled, x)[0]

    def test_accepts_feature_matrix(self):
        fm = FeatureMatrix(values=np.ones((4, 2)), channel_names=("fx", "fz"))
        model = SvmModel(W=np.eye(2, 8), b=np.zeros(2), C=1.0,
                         classes=("a", "b"))
        pred, _ = predict_svm(model, fm)
        assert pred == "a"

    def test_dimension_mismatch(self):
        model = SvmModel(W=np.zeros((2, 3)), b=np.zeros(2), C=1.0,
                         classes=("a", "b"))
        with pytest.raises(DimensionMismatch):
            predict_svm(model, np.zeros(4))


class TestSerialization:
    def test_compliance_classes_stored_as_labels(self):
        model = SvmModel(W=np.ones((4, 2)), b=np.zeros(4), C=1.0)
        d = model_to_dict(model)
        assert d["kind"] == "svm"
        assert d["classes"] == ["hard-skin", "hard", "medium", "soft"]
        back = model_from_dict(json.loads(json.dumps(d)))
        assert back.classes == CLASS_ORDER
        np.testing.assert_array_equal(back.W, model.W)

    def test_plain_labels_survive(self):
        model = SvmModel(W=np.ones((2, 2)), b=np.zeros(2), C=0.5,
                         classes=("a", "b"), channel_names=("fx", "fz"))
        back = model_from_dict(model_to_dict(model))
        assert back.classes == ("a", "b")
        assert back.channel_names == ("fx", "fz")
        assert back.C == 0.5

    def test_file_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        model = SvmModel(W=rng.normal(size=(4, 6)), b=rng.normal(size=4),
                         C=1.5)
        p = tmp_path / "svm.json"
        save_model(model, p)
        back = load_model(p)
        np.testing.assert_array_equal(back.W, model.W)
        np.testing.assert_array_equal(back.b, model.b)
