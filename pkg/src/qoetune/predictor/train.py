"""Training the exit network: stratified split, undersampling, mini-batch SGD."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import accuracy_score, f1_score, precision_score, recall_score
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from .features import N_CHANNELS, WINDOW
from .net import ExitNet


class TrainingError(ValueError):
    pass


def _check_features(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 2 and X.shape[1] == N_CHANNELS * WINDOW:
        X = X.reshape(-1, N_CHANNELS, WINDOW)
    if X.ndim != 3 or X.shape[1:] != (N_CHANNELS, WINDOW):
        raise ValueError(f"expected features of shape (n, {N_CHANNELS}, {WINDOW}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    return X


def undersample(y, rng: np.random.Generator) -> np.ndarray:
    """Indices keeping every minority example and an equal-size random majority subset."""
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise TrainingError("undersampling needs both classes")
    n = counts.min()
    keep = [rng.choice(np.nonzero(y == c)[0], size=n, replace=False) for c in classes]
    return np.sort(np.concatenate(keep))


def classification_metrics(y_true, y_pred) -> dict:
    return {
        "accuracy": float(accuracy_score(y_true, y_pred)),
        "precision": float(precision_score(y_true, y_pred, zero_division=0)),
        "recall": float(recall_score(y_true, y_pred, zero_division=0)),
        "f1": float(f1_score(y_true, y_pred, zero_division=0)),
    }


class ExitNetClassifier(BaseEstimator, ClassifierMixin):
    """scikit-learn wrapper around :class:`ExitNet` trained by plain mini-batch SGD.

    Labels: 0 = continued watching, 1 = exited.
    """

    def __init__(self, lr=0.05, epochs=30, batch_size=64, seed=0, balanced=True, channels=64,
                 hidden=64, kernel=3):
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.balanced = balanced
        self.channels = channels
        self.hidden = hidden
        self.kernel = kernel

    def fit(self, X, y):
        X = _check_features(X)
        y = np.asarray(y, dtype=int)
        if np.unique(y).size < 2:
            raise TrainingError("training rows contain a single class")
        rng = np.random.default_rng(self.seed)
        self.class_counts_ = np.bincount(y, minlength=2)
        if self.balanced:
            idx = undersample(y, rng)
            X, y = X[idx], y[idx]
        self.net_ = ExitNet(self.channels, self.hidden, self.kernel, seed=int(rng.integers(2**31)))
        self.classes_ = np.array([0, 1])
        self.train_class_counts_ = np.bincount(y, minlength=2)
        # odds correction that maps the trained class prior back to the original one
        c, t = self.class_counts_, self.train_class_counts_
        self.prior_odds_ = float((c[1] / c[0]) / (t[1] / t[0]))
        self.loss_curve_ = []
        params = self.net_.params
        n = len(y)
        for _ in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for lo in range(0, n, self.batch_size):
                b = order[lo:lo + self.batch_size]
                loss, grads = self.net_.loss_and_grads(X[b], y[b])
                if not np.isfinite(loss):
                    raise TrainingError("non-finite loss")
                for k in params:
                    params[k] -= self.lr * grads[k]
                total += loss * len(b)
            self.loss_curve_.append(total / n)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return self.net_.predict_proba(_check_features(X))

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)


def train_exit_net(X, y, *, lr=0.05, epochs=30, batch_size=64, seed=0, balanced=True, test_size=0.2):
    """Stratified 80:20 split, fit on the training part, score the held-out part.

    Returns ``(classifier, metrics)``.
    """
    X = _check_features(X)
    y = np.asarray(y, dtype=int)
    if np.unique(y).size < 2:
        raise TrainingError("training rows contain a single class")
    X_tr, X_te, y_tr, y_te = train_test_split(X, y, test_size=test_size, stratify=y, random_state=seed)
    clf = ExitNetClassifier(lr=lr, epochs=epochs, batch_size=batch_size, seed=seed, balanced=balanced)
    clf.fit(X_tr, y_tr)
    metrics = classification_metrics(y_te, clf.predict(X_te))
    metrics["n_train"] = int(clf.train_class_counts_.sum())
    metrics["n_test"] = int(len(y_te))
    return clf, metrics
