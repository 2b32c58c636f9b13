"""Regularized logistic regression: the independent per-message classifier.

Spam probabilities from this model are the priors consumed by the stacking
and joint-inference modules. Training is full-batch gradient descent with
backtracking line search (deterministic); a seeded stochastic mode exists
for larger data.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data_model import DataError
from .features import FeatureMatrix

log = logging.getLogger(__name__)

PROB_EPS = 1e-15


def sigmoid(z):
    z = np.atleast_1d(np.asarray(z, dtype=float))
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logit(p: float) -> float:
    p = min(max(p, 1e-9), 1.0 - 1e-9)
    return float(np.log(p / (1.0 - p)))


def recenter_scores(scores: dict, center: float) -> dict:
    """Shift probabilities in log-odds so `center` maps to 0.5.

    Joint and pooled models treat 0.5 as neutral, but a calibrated classifier
    on imbalanced data scores even clear spam below 0.5; dividing out the base
    rate puts group evidence on the right side of neutral. Extreme values
    (gold labels injected as 0/1) stay extreme.
    """
    center = min(max(center, 1e-6), 1.0 - 1e-6)
    shift = np.log(center / (1.0 - center))
    out = {}
    for mid, p in scores.items():
        p = min(max(p, 1e-12), 1.0 - 1e-12)
        z = np.log(p / (1.0 - p)) - shift
        out[mid] = float(1.0 / (1.0 + np.exp(-z)))
    return out


def columns_hash(column_names: list) -> str:
    h = hashlib.sha256("\x1f".join(column_names).encode("utf-8")).hexdigest()
    return h[:16]


class Scaler:
    """Standardizes a chosen subset of columns with training statistics."""

    def __init__(self, column_indices, means, stds):
        self.column_indices = list(column_indices)
        self.means = np.asarray(means, dtype=float)
        self.stds = np.asarray(stds, dtype=float)

    @classmethod
    def fit(cls, X: sp.spmatrix, column_indices: list) -> "Scaler":
        sub = np.asarray(X.tocsc()[:, column_indices].todense())
        means = sub.mean(axis=0)
        stds = sub.std(axis=0)
        stds[stds < 1e-12] = 1.0
        return cls(column_indices, means, stds)

    def transform(self, X: sp.spmatrix) -> sp.csr_matrix:
        if not self.column_indices:
            return X.tocsr()
        Xc = X.tocsc()
        scaled = (np.asarray(Xc[:, self.column_indices].todense()) - self.means) / self.stds
        rest_idx = [j for j in range(X.shape[1]) if j not in set(self.column_indices)]
        combined = sp.hstack([sp.csr_matrix(scaled), Xc[:, rest_idx]], format="csr")
        # restore the original column order
        perm = list(self.column_indices) + rest_idx
        inverse = np.empty(len(perm), dtype=int)
        inverse[perm] = np.arange(len(perm))
        return combined[:, inverse].tocsr()

    def to_dict(self) -> dict:
        return {
            "column_indices": self.column_indices,
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(d["column_indices"], d["means"], d["stds"])


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    l2: float
    n_iter: int = 0
    converged: bool = True
    columns_hash: str = ""
    n_columns: int = 0
    scaler: Scaler | None = None
    loss_trace: list = field(default_factory=list, repr=False)

    def decision(self, X: sp.spmatrix) -> np.ndarray:
        Xs = self.scaler.transform(X) if self.scaler is not None else X
        return np.asarray(Xs @ self.weights).ravel() + self.bias

    def predict_proba_matrix(self, X: sp.spmatrix) -> np.ndarray:
        if X.shape[1] != len(self.weights):
            raise DataError(f"feature width {X.shape[1]} does not match model ({len(self.weights)})")
        return np.clip(sigmoid(self.decision(X)), PROB_EPS, 1.0 - PROB_EPS)

    def predict_proba(self, fm: FeatureMatrix) -> dict:
        if self.columns_hash and columns_hash(fm.column_names) != self.columns_hash:
            raise DataError("feature matrix columns do not match the model's column dictionary")
        p = self.predict_proba_matrix(fm.matrix)
        return {rid: float(pi) for rid, pi in zip(fm.row_ids, p)}

    def to_json(self) -> str:
        payload = {
            "version": 1,
            "columns_hash": self.columns_hash,
            "n_columns": self.n_columns or len(self.weights),
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "l2": self.l2,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "scaler": self.scaler.to_dict() if self.scaler is not None else None,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LinearModel":
        d = json.loads(text)
        if d.get("version") != 1:
            raise DataError(f"unsupported model version: {d.get('version')}")
        scaler = Scaler.from_dict(d["scaler"]) if d.get("scaler") else None
        return cls(
            weights=np.array(d["weights"], dtype=float),
            bias=d["bias"],
            l2=d["l2"],
            n_iter=d["n_iter"],
            converged=d["converged"],
            columns_hash=d["columns_hash"],
            n_columns=d["n_columns"],
            scaler=scaler,
        )


def _loss(X, y, w, b, l2):
    z = np.asarray(X @ w).ravel() + b
    # log(1 + exp(-s*z)) with s = +-1, computed stably
    sz = np.where(y > 0.5, z, -z)
    per_row = np.where(sz > 0, np.log1p(np.exp(-sz)), -sz + np.log1p(np.exp(sz)))
    return per_row.mean() + 0.5 * l2 * float(w @ w)


def train(X: sp.spmatrix, y: np.ndarray, l2: float = 1.0, max_iter: int = 500,
          tol: float = 1e-6, seed: int = 0, method: str = "batch") -> LinearModel:
    """Minimize L2-regularized logistic loss to gradient inf-norm <= tol.

    Single-class targets yield a constant-probability model (with a warning)
    rather than an error.
    """
    if l2 < 0:
        raise DataError("l2 must be >= 0")
    X = X.tocsr()
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != len(y):
        raise DataError("row count of X and y disagree")
    n, d = X.shape

    prevalence = y.mean() if n else 0.0
    if n == 0 or prevalence in (0.0, 1.0):
        log.warning("single-class training data (prevalence=%.3f): constant model", prevalence)
        return LinearModel(weights=np.zeros(d), bias=_logit(prevalence), l2=l2,
                           n_iter=0, converged=True, n_columns=d)

    if method == "sgd":
        return _train_sgd(X, y, l2, max_iter, tol, seed)

    w = np.zeros(d)
    b = 0.0
    loss = _loss(X, y, w, b, l2)
    trace = [loss]
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = sigmoid(np.asarray(X @ w).ravel() + b)
        resid = (p - y) / n
        grad_w = np.asarray(X.T @ resid).ravel() + l2 * w
        grad_b = resid.sum()
        gnorm = max(np.abs(grad_w).max(initial=0.0), abs(grad_b))
        if gnorm <= tol:
            converged = True
            break
        gsq = float(grad_w @ grad_w) + grad_b * grad_b
        step = min(step * 2.0, 64.0)
        while step > 1e-16:
            w_new = w - step * grad_w
            b_new = b - step * grad_b
            loss_new = _loss(X, y, w_new, b_new, l2)
            if loss_new <= loss - 1e-4 * step * gsq:
                break
            step *= 0.5
        w, b, loss = w_new, b_new, loss_new
        trace.append(loss)
    if not converged:
        log.warning("training stopped at max_iter=%d (gradient norm above tol)", max_iter)
    return LinearModel(weights=w, bias=b, l2=l2, n_iter=it, converged=converged,
                       n_columns=d, loss_trace=trace)


def _train_sgd(X, y, l2, max_iter, tol, seed):
    rng = np.random.default_rng(seed)
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    trace = []
    for epoch in range(max_iter):
        order = rng.permutation(n)
        lr = 0.5 / (1.0 + 0.1 * epoch)
        for i in order:
            xi = X.getrow(i)
            p = sigmoid(xi @ w + b)[0]
            g = p - y[i]
            w *= 1.0 - lr * l2
            w -= lr * g * np.asarray(xi.todense()).ravel()
            b -= lr * g
        loss = _loss(X, y, w, b, l2)
        trace.append(loss)
        if len(trace) > 1 and abs(trace[-2] - trace[-1]) < tol:
            return LinearModel(weights=w, bias=b, l2=l2, n_iter=epoch + 1, converged=True,
                               n_columns=d, loss_trace=trace)
    return LinearModel(weights=w, bias=b, l2=l2, n_iter=max_iter, converged=False,
                       n_columns=d, loss_trace=trace)


@dataclass
class ClassifierConfig:
    l2: float = 1.0
    max_iter: int = 500
    tol: float = 1e-6
    seed: int = 0
    method: str = "batch"


def fit_classifier(fm: FeatureMatrix, labels: dict, scale_columns: list | None = None,
                   config: ClassifierConfig | None = None) -> LinearModel:
    """Train on a labeled FeatureMatrix, standardizing the given columns."""
    config = config or ClassifierConfig()
    missing = [rid for rid in fm.row_ids if rid not in labels]
    if missing:
        raise DataError(f"{len(missing)} training rows lack labels (first: {missing[0]})")
    y = np.array([labels[rid] for rid in fm.row_ids], dtype=float)

    scaler = None
    X = fm.matrix
    if scale_columns:
        col_index = fm.column_index
        idx = [col_index[c] for c in scale_columns if c in col_index]
        if idx:
            scaler = Scaler.fit(X, idx)
            X = scaler.transform(X)
    model = train(X, y, l2=config.l2, max_iter=config.max_iter, tol=config.tol,
                  seed=config.seed, method=config.method)
    model.scaler = scaler
    model.columns_hash = columns_hash(fm.column_names)
    return model
