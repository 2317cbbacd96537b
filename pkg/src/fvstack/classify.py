"""One-vs-rest linear SVM baseline and evaluation metrics (accuracy, AP, mAP)."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

DEFAULT_C = 100.0
PROTOCOLS = ("mAcc", "mAP", "mAP+")


def label_matrix(labels, n_classes: int | None = None) -> np.ndarray:
    """(n, c) 0/1 matrix from a list of label sets or an int label vector."""
    sets = [frozenset(int(x) for x in l) if isinstance(l, (set, frozenset, list, tuple, np.ndarray))
            else frozenset([int(l)]) for l in labels]
    if n_classes is None:
        n_classes = 1 + max((max(s) for s in sets if s), default=-1)
    Y = np.zeros((len(sets), n_classes))
    for i, s in enumerate(sets):
        for k in s:
            if not 0 <= k < n_classes:
                raise DataError(f"label {k} outside [0, {n_classes})")
            Y[i, k] = 1.0
    return Y


@dataclass(eq=False)
class LinearSvmModel:
    W: np.ndarray  # (c, d)
    b: np.ndarray  # (c,)
    C: float = DEFAULT_C
    traces: list = field(default_factory=list, repr=False)

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.W.shape[1]:
            raise DataError(f"expected {self.W.shape[1]} features")
        return X @ self.W.T + self.b

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)


def svm_objective(w, b, X, y, C: float) -> float:
    """0.5 (|w|^2 + b^2) + C * sum hinge; the bias is regularized like a weight
    on a constant feature."""
    margins = 1.0 - y * (X @ w + b)
    return float(0.5 * (w @ w + b * b) + C * np.maximum(margins, 0.0).sum())


def _dual_cd(Q: np.ndarray, y: np.ndarray, C: float, tol: float, max_epochs: int, rng):
    """Dual coordinate descent on the bias-augmented kernel ``Q``.

    Returns ``(alpha, trace)`` where ``trace`` is the primal objective of the
    best iterate after each epoch.
    """
    n = y.size
    alpha = np.zeros(n)
    f = np.zeros(n)  # decision values of the current iterate
    diag = np.diag(Q).copy()
    best_alpha, best_obj = alpha.copy(), C * n  # objective at w = 0
    trace = []
    for _ in range(max_epochs):
        for i in rng.permutation(n):
            g = y[i] * f[i] - 1.0
            a = alpha[i]
            if (a == 0.0 and g >= 0) or (a == C and g <= 0) or diag[i] <= 0:
                continue
            new = min(max(a - g / diag[i], 0.0), C)
            if new != a:
                f += (new - a) * y[i] * Q[i]
                alpha[i] = new
        ay = alpha * y
        norm2 = ay @ f
        primal = 0.5 * norm2 + C * np.maximum(1.0 - y * f, 0.0).sum()
        dual = alpha.sum() - 0.5 * norm2
        if primal < best_obj:
            best_obj, best_alpha = primal, alpha.copy()
        trace.append(best_obj)
        if best_obj - dual <= tol * abs(best_obj):
            break
    return best_alpha, trace


def svm_train(X, labels, C: float = DEFAULT_C, n_classes: int | None = None,
              tol: float = 1e-6, max_epochs: int = 2000, seed: int = 0) -> LinearSvmModel:
    """L2-regularized hinge-loss one-vs-rest linear SVM (multi-class or multi-label)."""
    X = np.asarray(X, dtype=np.float64)
    Y = label_matrix(labels, n_classes)
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DataError("feature and label counts differ")
    present = np.flatnonzero(Y.sum(axis=0) > 0)
    if Y.shape[1] < 2 or present.size < 2:
        raise DataError("the SVM needs at least two classes with examples")
    Q = X @ X.T + 1.0
    W = np.zeros((Y.shape[1], X.shape[1]))
    b = np.zeros(Y.shape[1])
    traces = []
    for k in range(Y.shape[1]):
        y = np.where(Y[:, k] > 0, 1.0, -1.0)
        alpha, trace = _dual_cd(Q, y, C, tol, max_epochs, np.random.default_rng([seed, k]))
        W[k] = (alpha * y) @ X
        b[k] = np.sum(alpha * y)
        traces.append(trace)
    return LinearSvmModel(W, b, C, traces)


# -- metrics -------------------------------------------------------------------------


def average_precision(scores, relevance) -> float:
    """Mean over positives of the precision at each positive's rank.

    Items are ranked by descending score; ties keep the input order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    rel = np.asarray(relevance, dtype=bool).ravel()
    if scores.shape != rel.shape:
        raise DataError("scores and relevance must have equal length")
    if not rel.any():
        raise DataError("average precision needs at least one positive")
    ranked = rel[np.argsort(-scores, kind="stable")]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, ranked.size + 1)
    return float(np.mean(hits[ranked] / ranks[ranked]))


def scores_of(model, X) -> np.ndarray:
    if hasattr(model, "decision_function"):
        return model.decision_function(X)
    if callable(model):
        return np.asarray(model(X))
    raise DataError(f"{type(model).__name__} cannot score inputs")


@dataclass
class EvalReport:
    protocol: str
    per_class_ap: dict
    mAP: float
    split_accuracies: list
    mean_accuracy: float | None = None
    std_accuracy: float | None = None
    per_class_accuracy: dict = field(default_factory=dict)

    def to_rows(self) -> list:
        rows = []
        for k, ap in self.per_class_ap.items():
            acc = self.per_class_accuracy.get(k)
            rows.append((str(k), f"{ap:.6f}", "" if acc is None else f"{acc:.6f}", ""))
        mean = "" if self.mean_accuracy is None else f"{self.mean_accuracy:.6f}"
        sd = "" if self.std_accuracy is None else f"{self.std_accuracy:.6f}"
        rows.append(("all", f"{self.mAP:.6f}", mean, sd))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("class,ap,accuracy,sd\n")
        for row in self.to_rows():
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        head = ("class", "AP", "accuracy", "sd")
        rows = [head] + self.to_rows()
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = [f"protocol: {self.protocol}"]
        for r in rows:
            lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        return "\n".join(lines) + "\n"


def evaluate(model, X, labels, protocol: str = "mAcc", n_classes: int | None = None,
             negative_class: int = 0) -> EvalReport:
    """Evaluate one split; see :func:`evaluate_splits` for several."""
    return evaluate_splits([(model, X, labels)], protocol, n_classes, negative_class)


def evaluate_splits(splits, protocol: str = "mAcc", n_classes: int | None = None,
                    negative_class: int = 0) -> EvalReport:
    """``splits`` is a list of ``(model, X, labels)``. APs are computed on the
    pooled scores of all splits; accuracies per split, with their mean and
    population standard deviation."""
    if protocol not in PROTOCOLS:
        raise DataError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    all_scores, all_Y, accs = [], [], []
    for model, X, labels in splits:
        S = scores_of(model, X)
        Y = label_matrix(labels, n_classes if n_classes is not None else S.shape[1])
        if S.shape != Y.shape:
            raise DataError(f"score shape {S.shape} != label shape {Y.shape}")
        if protocol == "mAcc":
            if np.any(Y.sum(axis=1) != 1):
                raise DataError("mAcc needs exactly one label per video (multi-class task)")
            accs.append(float(np.mean(S.argmax(axis=1) == Y.argmax(axis=1))))
        all_scores.append(S)
        all_Y.append(Y)
    S, Y = np.concatenate(all_scores), np.concatenate(all_Y)
    classes = range(Y.shape[1])
    if protocol == "mAP+":
        if not 0 <= negative_class < Y.shape[1]:
            raise DataError("negative class index out of range")
        classes = [k for k in classes if k != negative_class]
    per_class = {k: average_precision(S[:, k], Y[:, k] > 0) for k in classes if Y[:, k].any()}
    if not per_class:
        raise DataError("no class has a positive example")
    report = EvalReport(protocol, per_class, float(np.mean(list(per_class.values()))), accs)
    if accs:
        report.mean_accuracy = float(np.mean(accs))
        report.std_accuracy = float(np.std(accs))
        pred = S.argmax(axis=1)
        truth = Y.argmax(axis=1)
        report.per_class_accuracy = {
            k: float(np.mean(pred[truth == k] == k)) for k in per_class if np.any(truth == k)
        }
    return report
