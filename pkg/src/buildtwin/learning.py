"""Incremental learners behind the scikit-learn estimator idiom.

Both models update in closed form per observation, so a training run is
bit-reproducible given the observation order, and state serializes to
plain JSON for persistence.
"""

from __future__ import annotations

from typing import Any

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))


class OnlineLogisticRegression(ClassifierMixin, BaseEstimator):
    """Logistic regression trained by one SGD step per observation.

    Weights start at zero, so the untrained model predicts 0.5. The
    update is the exact log-loss gradient: w -= lr * (p - y) * x.
    """

    def __init__(self, learning_rate: float = 0.05):
        self.learning_rate = learning_rate

    def _ensure_initialized(self, n_features: int) -> None:
        if not hasattr(self, "coef_"):
            self.coef_ = np.zeros(n_features, dtype=float)
            self.intercept_ = 0.0
            self.n_observed_ = 0
            self.classes_ = np.array([0, 1])
        elif self.coef_.shape[0] != n_features:
            raise ValueError(
                f"expected {self.coef_.shape[0]} features, got {n_features}"
            )

    def partial_fit(self, X, y) -> "OnlineLogisticRegression":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        self._ensure_initialized(X.shape[1])
        for xi, yi in zip(X, y):
            p = sigmoid(float(xi @ self.coef_) + self.intercept_)
            gradient = p - yi
            self.coef_ -= self.learning_rate * gradient * xi
            self.intercept_ -= self.learning_rate * gradient
            self.n_observed_ += 1
        return self

    fit = partial_fit

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self._ensure_initialized(X.shape[1])
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X) -> np.ndarray:
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def get_state(self) -> dict[str, Any]:
        if not hasattr(self, "coef_"):
            return {"coef": None, "intercept": 0.0, "n_observed": 0}
        return {
            "coef": self.coef_.tolist(),
            "intercept": float(self.intercept_),
            "n_observed": int(self.n_observed_),
        }

    def set_state(self, state: dict[str, Any]) -> "OnlineLogisticRegression":
        if state.get("coef") is not None:
            self.coef_ = np.asarray(state["coef"], dtype=float)
            self.intercept_ = float(state["intercept"])
            self.n_observed_ = int(state["n_observed"])
            self.classes_ = np.array([0, 1])
        return self


class EwLogDuration(RegressorMixin, BaseEstimator):
    """Exponentially weighted mean/variance of log-duration.

    First observation seeds the mean directly with the configured prior
    variance; afterwards
        delta = x - mu; mu += alpha * delta;
        var = (1 - alpha) * (var + alpha * delta^2).
    The feature matrix is accepted for estimator-API compatibility but
    the state depends only on the targets.
    """

    def __init__(self, alpha: float = 0.1, initial_variance: float = 0.25):
        self.alpha = alpha
        self.initial_variance = initial_variance

    def partial_fit(self, X, y) -> "EwLogDuration":
        y = np.asarray(y, dtype=float).ravel()
        if np.any(y <= 0):
            raise ValueError("durations must be positive")
        if not hasattr(self, "mean_"):
            self.mean_ = 0.0
            self.variance_ = self.initial_variance
            self.n_observed_ = 0
        for duration in y:
            x = float(np.log(duration))
            if self.n_observed_ == 0:
                self.mean_ = x
            else:
                delta = x - self.mean_
                self.mean_ += self.alpha * delta
                self.variance_ = (1.0 - self.alpha) * (
                    self.variance_ + self.alpha * delta * delta
                )
            self.n_observed_ += 1
        return self

    fit = partial_fit

    @property
    def sigma_(self) -> float:
        return float(np.sqrt(self.variance_))

    def predict(self, X) -> np.ndarray:
        n = 1 if X is None else len(np.atleast_2d(np.asarray(X, dtype=float)))
        value = float(np.exp(self.mean_)) if getattr(self, "n_observed_", 0) else 1.0
        return np.full(n, value)

    def get_state(self) -> dict[str, Any]:
        if not hasattr(self, "mean_"):
            return {"mu": None, "var": self.initial_variance, "n_observed": 0}
        return {
            "mu": float(self.mean_),
            "var": float(self.variance_),
            "n_observed": int(self.n_observed_),
        }

    def set_state(self, state: dict[str, Any]) -> "EwLogDuration":
        if state.get("mu") is not None:
            self.mean_ = float(state["mu"])
            self.variance_ = float(state["var"])
            self.n_observed_ = int(state["n_observed"])
        return self
