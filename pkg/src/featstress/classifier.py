"""One-vs-rest linear SVM trained by dual coordinate descent.

Each class gets an independent binary problem (rows carrying the class
against all other rows). The bias is learned as the weight of an extra
constant feature, so it is regularized along with the other weights.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .featstore import DatasetSplit, LabelSet, _atomic_write, decode_array, encode_array
from .numerics import RngStream

__all__ = [
    "OneVsRestLinearSVC",
    "decision_values",
    "dual_objective",
    "load_classifier",
    "predict",
    "primal_objective",
    "save_classifier",
    "train",
]

LOSSES = ("l1_hinge", "l2_hinge")


def _loss_terms(loss: str, C: float) -> tuple[float, float]:
    # (upper bound on each dual variable, diagonal shift of Q)
    if loss == "l1_hinge":
        return C, 0.0
    if loss == "l2_hinge":
        return np.inf, 0.5 / C
    raise ValueError(f"unknown loss {loss!r}")


def dual_cd(Xy, C, loss="l1_hinge", tol=0.1, max_iter=1000, rng=None):
    """Solve one binary SVM in the dual.

    ``Xy`` holds the (bias-augmented) rows already multiplied by their
    +1/-1 labels. Returns ``(w, alpha, epochs, converged)``; convergence
    means the spread of projected gradients over an epoch fell to ``tol``.
    """
    n, d = Xy.shape
    upper, diag = _loss_terms(loss, C)
    alpha = np.zeros(n)
    w = np.zeros(d)
    qd = np.einsum("ij,ij->i", Xy, Xy) + diag
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = list(Xy)

    epoch = 0
    converged = False
    while epoch < max_iter:
        epoch += 1
        pg_max, pg_min = -np.inf, np.inf
        for i in rng.permutation(n):
            a = alpha[i]
            g = float(rows[i] @ w) - 1.0 + diag * a
            if a == 0.0:
                pg = min(g, 0.0)
            elif a >= upper:
                pg = max(g, 0.0)
            else:
                pg = g
            pg_max = max(pg_max, pg)
            pg_min = min(pg_min, pg)
            if pg != 0.0:
                if qd[i] > 0.0:
                    new = min(max(a - g / qd[i], 0.0), upper)
                else:
                    new = upper if g < 0 else a
                if new != a:
                    alpha[i] = new
                    w += (new - a) * rows[i]
        if pg_max - pg_min <= tol:
            converged = True
            break
    return w, alpha, epoch, converged


def primal_objective(w, Xy, C, loss="l1_hinge") -> float:
    margins = np.maximum(0.0, 1.0 - Xy @ w)
    penalty = margins.sum() if loss == "l1_hinge" else (margins**2).sum()
    return 0.5 * float(w @ w) + C * float(penalty)


def dual_objective(alpha, Xy, C, loss="l1_hinge") -> float:
    """Dual value written as a maximization (never above the primal)."""
    _, diag = _loss_terms(loss, C)
    v = Xy.T @ alpha
    return float(alpha.sum()) - 0.5 * float(v @ v) - 0.5 * diag * float(alpha @ alpha)


class OneVsRestLinearSVC(ClassifierMixin, BaseEstimator):
    """Linear SVM, one binary problem per class.

    Parameters
    ----------
    C : float
        Penalty on the hinge loss.
    loss : {"l1_hinge", "l2_hinge"}
    tol : float
        Stop when max minus min projected gradient over an epoch is below this.
    max_iter : int
        Epoch cap per class; ``converged_`` records whether it was reached.
    bias : float
        Value of the constant feature appended to every row; 0 disables the bias.
    random_state : int
        Seed of the coordinate visiting order.
    n_jobs : int or None
        Threads used across classes. Results do not depend on it.
    """

    def __init__(self, C=1.0, loss="l1_hinge", tol=0.1, max_iter=1000, bias=1.0, random_state=0, n_jobs=None):
        self.C = C
        self.loss = loss
        self.tol = tol
        self.max_iter = max_iter
        self.bias = bias
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _augment(self, X):
        if self.bias:
            return np.hstack([X, np.full((X.shape[0], 1), float(self.bias))])
        return X

    def fit(self, X, y):
        """Fit on class ids (1-D) or a rows-by-classes boolean indicator (2-D)."""
        X = validate_data(self, X, reset=True, dtype=np.float64)
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"fit: {X.shape[0]} rows but {y.shape[0]} labels")
        if y.ndim == 1:
            self.classes_ = np.unique(y)
            Y = y[:, None] == self.classes_[None, :]
        elif y.ndim == 2:
            Y = y.astype(bool)
            self.classes_ = np.arange(Y.shape[1])
        else:
            raise ValueError("fit: labels must be 1-D ids or a 2-D indicator")
        if not self.C > 0:
            raise ValueError("fit: C must be positive")
        _loss_terms(self.loss, self.C)

        counts = Y.sum(axis=0)
        for k, c in enumerate(counts):
            if c == 0 or c == Y.shape[0]:
                what = "positive" if c == 0 else "negative"
                raise ValueError(f"fit: class {self.classes_[k]} has no {what} training rows")

        Xa = self._augment(X)
        seed = int(self.random_state or 0)

        def solve(k):
            signs = np.where(Y[:, k], 1.0, -1.0)
            rng = RngStream(seed, f"svm/class{k}").generator()
            return dual_cd(Xa * signs[:, None], self.C, self.loss, self.tol, self.max_iter, rng)

        ks = range(len(self.classes_))
        if self.n_jobs and self.n_jobs > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                results = list(pool.map(solve, ks))
        else:
            results = [solve(k) for k in ks]

        W = np.array([r[0] for r in results])
        if self.bias:
            self.coef_, self.intercept_ = W[:, :-1].copy(), W[:, -1] * float(self.bias)
        else:
            self.coef_, self.intercept_ = W, np.zeros(W.shape[0])
        self.dual_coef_ = np.array([r[1] for r in results])
        self.n_iter_ = np.array([r[2] for r in results])
        self.converged_ = np.array([r[3] for r in results])
        return self

    def decision_function(self, X):
        """Scores ``w_k . x + b_k``, one column per class."""
        check_is_fitted(self)
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return X @ self.coef_.T + self.intercept_

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


def _rows(features, indices=None) -> np.ndarray:
    X = np.asarray(getattr(features, "values", features), dtype=np.float64)
    return X if indices is None else X[np.asarray(indices, dtype=np.intp)]


def train(features, labels: LabelSet, split: DatasetSplit, c: float = 1.0, **kwargs) -> OneVsRestLinearSVC:
    """Fit one binary SVM per class of ``labels`` on the training rows of ``split``."""
    X = _rows(features)
    split.check_rows(X.shape[0])
    if len(labels) != X.shape[0]:
        raise ValueError(f"train: {X.shape[0]} feature rows but {len(labels)} label rows")
    idx = list(split.train_indices)
    Y = labels.indicator()[idx]
    return OneVsRestLinearSVC(C=c, **kwargs).fit(X[idx], Y)


def decision_values(clf: OneVsRestLinearSVC, features) -> np.ndarray:
    return clf.decision_function(_rows(features))


def predict(clf: OneVsRestLinearSVC, features) -> np.ndarray:
    return clf.predict(_rows(features))


CLASSIFIER_VERSION = 1


def save_classifier(clf: OneVsRestLinearSVC, path) -> None:
    """JSON manifest with weights and biases as base64 FMAT blobs."""
    check_is_fitted(clf)
    manifest = {
        "version": CLASSIFIER_VERSION,
        "kind": "ovr_linear_svc",
        "classes": [int(c) for c in clf.classes_],
        "dims": int(clf.n_features_in_),
        "params": {k: v for k, v in clf.get_params().items() if v is None or isinstance(v, (int, float, str))},
        "weights": encode_array(clf.coef_),
        "bias": encode_array(clf.intercept_),
        "iterations_used": [int(i) for i in clf.n_iter_],
        "converged": [bool(c) for c in clf.converged_],
    }
    _atomic_write(path, json.dumps(manifest, indent=1) + "\n")


def load_classifier(path) -> OneVsRestLinearSVC:
    d = json.loads(Path(path).read_text())
    if d.get("version") != CLASSIFIER_VERSION:
        raise ValueError(f"unsupported version {d.get('version')}")
    clf = OneVsRestLinearSVC(**d["params"])
    clf.classes_ = np.asarray(d["classes"])
    clf.coef_ = decode_array(d["weights"])
    clf.intercept_ = decode_array(d["bias"])[0]
    clf.n_features_in_ = int(d["dims"])
    clf.n_iter_ = np.asarray(d["iterations_used"])
    clf.converged_ = np.asarray(d["converged"])
    if clf.coef_.shape != (len(clf.classes_), clf.n_features_in_):
        raise ValueError("corrupt classifier payload: weight shape mismatch")
    return clf
