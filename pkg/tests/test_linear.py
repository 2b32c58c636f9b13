import numpy as np
import pytest
import scipy.sparse as sp

from relspam.data_model import DataError
from relspam.features import FeatureMatrix
from relspam.linear import (
    ClassifierConfig,
    LinearModel,
    Scaler,
    columns_hash,
    fit_classifier,
    sigmoid,
    train,
)


def random_instance(rng, n=50, d=5):
    X = rng.normal(size=(n, d))
    w_true = rng.normal(size=d)
    p = 1.0 / (1.0 + np.exp(-(X @ w_true)))
    y = (rng.random(n) < p).astype(float)
    return sp.csr_matrix(X), y


def gd_oracle(X, y, l2, iters=200000, lr=0.5, tol=1e-6):
    """Naive fixed-step full-batch gradient descent, independent of the solver."""
    X = np.asarray(X.todense())
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(iters):
        z = X @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        gw = X.T @ (p - y) / n + l2 * w
        gb = (p - y).mean()
        if max(np.abs(gw).max(), abs(gb)) <= tol:
            break
        w -= lr * gw
        b -= lr * gb
    return w, b


class TestTrain:
    def test_loss_decreases_monotonically(self):
        X = sp.csr_matrix(np.array([[1.0], [-1.0]]))
        y = np.array([1.0, 0.0])
        model = train(X, y, l2=1.0)
        diffs = np.diff(model.loss_trace)
        assert (diffs <= 0).all()

    def test_single_class_constant_model(self):
        X = sp.csr_matrix(np.random.default_rng(0).normal(size=(10, 3)))
        y = np.zeros(10)
        model = train(X, y, l2=1.0)
        p = model.predict_proba_matrix(X)
        assert np.allclose(p, p[0])
        assert p[0] == pytest.approx(0.0, abs=1e-6)

    def test_matches_gradient_descent_oracle(self):
        rng = np.random.default_rng(123)
        X, y = random_instance(rng, n=50, d=5)
        if len(set(y)) < 2:
            pytest.skip("degenerate draw")
        model = train(X, y, l2=0.1, max_iter=5000, tol=1e-8)
        w_ref, b_ref = gd_oracle(X, y, l2=0.1)
        assert model.converged
        assert np.abs(model.weights - w_ref).max() < 1e-4
        assert abs(model.bias - b_ref) < 1e-4

    def test_final_loss_beats_zero_vector(self):
        rng = np.random.default_rng(7)
        X, y = random_instance(rng, n=80, d=6)
        model = train(X, y, l2=0.5)
        assert model.loss_trace[-1] <= model.loss_trace[0]

    def test_retraining_is_bit_reproducible(self):
        rng = np.random.default_rng(21)
        X, y = random_instance(rng, n=40, d=4)
        a = train(X, y, l2=1.0, seed=3)
        b = train(X, y, l2=1.0, seed=3)
        assert np.array_equal(a.weights, b.weights)
        assert a.bias == b.bias

    def test_sgd_mode_is_seeded(self):
        rng = np.random.default_rng(2)
        X, y = random_instance(rng, n=60, d=4)
        a = train(X, y, l2=0.1, method="sgd", max_iter=20, seed=5)
        b = train(X, y, l2=0.1, method="sgd", max_iter=20, seed=5)
        assert np.array_equal(a.weights, b.weights)

    def test_negative_l2_rejected(self):
        with pytest.raises(DataError):
            train(sp.csr_matrix(np.ones((2, 1))), np.array([0.0, 1.0]), l2=-1)


class TestPredict:
    def test_zero_model_gives_half(self):
        model = LinearModel(weights=np.zeros(3), bias=0.0, l2=1.0)
        X = sp.csr_matrix(np.random.default_rng(1).normal(size=(5, 3)))
        assert np.allclose(model.predict_proba_matrix(X), 0.5)

    def test_large_margin_saturates(self):
        model = LinearModel(weights=np.array([20.0]), bias=0.0, l2=1.0)
        X = sp.csr_matrix(np.array([[1.0]]))
        assert model.predict_proba_matrix(X)[0] >= 1 - 1e-8

    def test_sigmoid_inverse_point(self):
        model = LinearModel(weights=np.array([1.0]), bias=0.0, l2=1.0)
        X = sp.csr_matrix(np.array([[0.8472978]]))
        assert model.predict_proba_matrix(X)[0] == pytest.approx(0.7, abs=1e-6)

    def test_monotone_in_score(self):
        model = LinearModel(weights=np.array([1.0]), bias=0.0, l2=1.0)
        X = sp.csr_matrix(np.linspace(-3, 3, 13).reshape(-1, 1))
        p = model.predict_proba_matrix(X)
        assert (np.diff(p) > 0).all()

    def test_width_mismatch_rejected(self):
        model = LinearModel(weights=np.zeros(3), bias=0.0, l2=1.0)
        with pytest.raises(DataError):
            model.predict_proba_matrix(sp.csr_matrix(np.ones((2, 4))))

    def test_column_hash_mismatch_rejected(self):
        fm = FeatureMatrix(["r1"], ["a", "b"], sp.csr_matrix(np.ones((1, 2))))
        model = LinearModel(weights=np.zeros(2), bias=0.0, l2=1.0,
                            columns_hash=columns_hash(["a", "c"]))
        with pytest.raises(DataError):
            model.predict_proba(fm)


class TestScaler:
    def test_standardizes_selected_columns(self):
        X = sp.csr_matrix(np.array([[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]]))
        scaler = Scaler.fit(X, [0])
        out = np.asarray(scaler.transform(X).todense())
        assert out[:, 0].mean() == pytest.approx(0.0, abs=1e-12)
        assert out[:, 0].std() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(out[:, 1], 5.0)

    def test_constant_column_left_finite(self):
        X = sp.csr_matrix(np.full((4, 1), 2.0))
        scaler = Scaler.fit(X, [0])
        out = np.asarray(scaler.transform(X).todense())
        assert np.isfinite(out).all()

    def test_column_order_preserved(self):
        rng = np.random.default_rng(4)
        X = sp.csr_matrix(rng.normal(size=(6, 4)))
        scaler = Scaler.fit(X, [1, 3])
        out = np.asarray(scaler.transform(X).todense())
        dense = np.asarray(X.todense())
        assert np.allclose(out[:, 0], dense[:, 0])
        assert np.allclose(out[:, 2], dense[:, 2])


class TestFitClassifier:
    def make_fm(self, n=30, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, 2))
        y = (X[:, 0] + 0.3 * rng.normal(size=n) > 0).astype(int)
        fm = FeatureMatrix([f"m{i}" for i in range(n)], ["f0", "f1"], sp.csr_matrix(X))
        labels = {f"m{i}": int(y[i]) for i in range(n)}
        return fm, labels

    def test_fit_and_predict(self):
        fm, labels = self.make_fm()
        model = fit_classifier(fm, labels, scale_columns=["f0", "f1"])
        preds = model.predict_proba(fm)
        assert set(preds) == set(fm.row_ids)
        assert all(0 < p < 1 for p in preds.values())

    def test_missing_labels_rejected(self):
        fm, labels = self.make_fm()
        del labels["m0"]
        with pytest.raises(DataError):
            fit_classifier(fm, labels)

    def test_serialization_round_trip(self):
        fm, labels = self.make_fm()
        model = fit_classifier(fm, labels, scale_columns=["f0"],
                               config=ClassifierConfig(l2=0.5))
        restored = LinearModel.from_json(model.to_json())
        a = model.predict_proba(fm)
        b = restored.predict_proba(fm)
        assert a == b


def test_sigmoid_extremes_stay_in_unit_interval():
    z = np.array([-1000.0, -50.0, 0.0, 50.0, 1000.0])
    p = sigmoid(z)
    assert (p >= 0).all() and (p <= 1).all()
    assert p[2] == 0.5
