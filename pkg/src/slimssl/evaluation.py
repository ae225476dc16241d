"""Evaluation: collapse statistics, linear probing and width sweeps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autograd import Tensor, no_grad
from .nn import SlimmableEncoder, recalibrate_stats

__all__ = [
    "CollapseDetector",
    "LinearProbe",
    "collapse_metrics",
    "extract_features",
    "linear_probe",
    "width_sweep",
]


def collapse_metrics(embeddings: np.ndarray) -> dict[str, float]:
    """``feature_std``: per-dimension std of the L2-normalized rows, averaged.
    ``mean_abs_cos``: mean ``|cos|`` over distinct pairs."""
    E = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ValueError("collapse metrics need at least two embeddings")
    U = E / np.maximum(np.linalg.norm(E, axis=1, keepdims=True), 1e-12)
    n = U.shape[0]
    cos = U @ U.T
    off = np.abs(cos[~np.eye(n, dtype=bool)])
    return {"feature_std": float(U.std(axis=0).mean()), "mean_abs_cos": float(min(off.mean(), 1.0))}


@dataclass
class CollapseDetector:
    """Declares collapse once either threshold is crossed for ``patience``
    consecutive observations."""

    mean_abs_cos: float = 0.95
    feature_std: float = 1e-2
    patience: int = 50
    streak: int = 0
    collapsed_at: int | None = None

    def update(self, t: int, metrics: dict[str, float]) -> bool:
        bad = metrics["mean_abs_cos"] >= self.mean_abs_cos or metrics["feature_std"] <= self.feature_std
        self.streak = self.streak + 1 if bad else 0
        if self.collapsed_at is None and self.streak >= self.patience:
            self.collapsed_at = t
        return self.collapsed_at is not None


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression fitted by full-batch accelerated gradient descent.

    Features are standardized with training-set statistics; the step size is
    the inverse of a Lipschitz bound on the loss gradient.
    """

    def __init__(self, l2: float = 1e-4, max_iter: int = 500, tol: float = 1e-6):
        self.l2 = l2
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("linear probe needs at least two classes in the training set")
        yi = np.searchsorted(self.classes_, y)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 1e-8, std, 1.0)
        Xs = (X - self.mean_) / self.scale_
        Xs[:, std <= 1e-8] = 0.0
        n, d = Xs.shape
        C = len(self.classes_)
        Y = np.eye(C)[yi]
        Xb = np.hstack([Xs, np.ones((n, 1))])
        L = 0.5 * _top_eigenvalue(Xb, n) + self.l2
        step = 1.0 / L
        W = np.zeros((d + 1, C))
        V = W.copy()
        k_t = 1.0

        def grad(M):
            P = softmax(Xb @ M, axis=1)
            G = Xb.T @ (P - Y) / n
            G[:-1] += self.l2 * M[:-1]
            return G

        for it in range(self.max_iter):
            G = grad(V)
            W_new = V - step * G
            k_new = 0.5 * (1 + np.sqrt(1 + 4 * k_t * k_t))
            V = W_new + ((k_t - 1) / k_new) * (W_new - W)
            W, k_t = W_new, k_new
            if np.linalg.norm(G) < self.tol:
                break
        self.coef_ = W[:-1]
        self.intercept_ = W[-1]
        self.n_iter_ = it + 1
        return self

    def _scaled(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) / self.scale_

    def decision_function(self, X):
        return self._scaled(X) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict_log_proba(self, X):
        return log_softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def _top_eigenvalue(X: np.ndarray, n: int, iters: int = 100) -> float:
    v = np.ones(X.shape[1]) / np.sqrt(X.shape[1])
    lam = 0.0
    for _ in range(iters):
        w = X.T @ (X @ v) / n
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 1.0
        v = w / lam
    return lam * 1.05


def linear_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    **probe_config,
) -> float:
    """Top-1 test accuracy of a linear classifier on frozen features."""
    probe = LinearProbe(**probe_config).fit(train_features, train_labels)
    return float(probe.score(test_features, test_labels))


def extract_features(
    enc: SlimmableEncoder, X: np.ndarray, width: float, batch_size: int = 1024
) -> np.ndarray:
    """Backbone features at ``width`` in evaluation mode (needs recalibrated statistics)."""
    was_training = enc.training
    enc.eval()
    try:
        with no_grad():
            out = [enc.backbone_features(Tensor(X[k:k + batch_size]), width).data for k in range(0, len(X), batch_size)]
    finally:
        enc.train(was_training)
    return np.concatenate(out)


def width_sweep(
    enc: SlimmableEncoder,
    widths: Sequence[float],
    train: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
    *,
    width_range: tuple[float, float] = (0.25, 1.0),
    calibration_batch: int = 512,
    probe_config: dict | None = None,
) -> list[dict]:
    """Recalibrate, extract features and linear-probe at every requested width.

    Returns one ``{"width", "params_active", "accuracy"}`` row per width.
    """
    lo, hi = width_range
    rows = []
    Xtr, ytr = train
    Xte, yte = test
    for w in widths:
        if not lo - 1e-9 <= w <= hi + 1e-9:
            raise ValueError(f"width {w} outside the trained range [{lo}, {hi}]")
        recalibrate_stats(enc, w, [Xtr[k:k + calibration_batch] for k in range(0, len(Xtr), calibration_batch)])
        acc = linear_probe(
            extract_features(enc, Xtr, w), ytr, extract_features(enc, Xte, w), yte, **(probe_config or {})
        )
        rows.append({"width": float(w), "params_active": enc.active_parameter_count(w), "accuracy": acc})
    return rows
