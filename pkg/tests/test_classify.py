import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from fvstack.classify import (
    EvalReport,
    average_precision,
    evaluate,
    evaluate_splits,
    label_matrix,
    svm_objective,
    svm_train,
)
from fvstack.errors import DataError


def _qp_oracle(X, y, C):
    """Slack-variable primal solved as a smooth constrained problem."""
    n, d = X.shape

    def obj(z):
        w, b, xi = z[:d], z[d], z[d + 1:]
        return 0.5 * (w @ w + b * b) + C * xi.sum()

    cons = [
        {"type": "ineq", "fun": lambda z: y * (X @ z[:d] + z[d]) - 1 + z[d + 1:]},
        {"type": "ineq", "fun": lambda z: z[d + 1:]},
    ]
    res = minimize(obj, np.zeros(d + 1 + n), constraints=cons, method="SLSQP",
                   options={"maxiter": 500, "ftol": 1e-12})
    return res.fun


def test_svm_matches_qp_oracle(rng):
    X = rng.standard_normal((20, 2))
    y = np.where(X[:, 0] + 0.5 * X[:, 1] + 0.3 * rng.standard_normal(20) > 0, 1, 0)
    model = svm_train(X, y, C=1.0)
    sign = np.where(y == 1, 1.0, -1.0)
    ours = svm_objective(model.W[1], model.b[1], X, sign, 1.0)
    assert ours == pytest.approx(_qp_oracle(X, sign, 1.0), rel=1e-3)


def test_svm_trace_is_monotone(rng):
    X = rng.standard_normal((40, 5))
    y = rng.integers(3, size=40)
    model = svm_train(X, y, C=10.0)
    for trace in model.traces:
        assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_svm_separable_perfect_train_accuracy(rng):
    X = np.concatenate([rng.standard_normal((30, 4)) + 4, rng.standard_normal((30, 4)) - 4])
    y = np.repeat([0, 1], 30)
    assert np.all(svm_train(X, y).predict(X) == y)


def test_svm_multilabel(rng):
    X = rng.standard_normal((50, 3))
    labels = [frozenset(k for k in range(2) if X[i, k] > 0) for i in range(50)]
    model = svm_train(X, labels, C=10.0, n_classes=2)
    S = model.decision_function(X)
    assert np.mean((S > 0) == label_matrix(labels, 2).astype(bool)) > 0.9


def test_svm_needs_two_classes(rng):
    with pytest.raises(DataError):
        svm_train(rng.standard_normal((5, 2)), [0] * 5)


def test_average_precision_known_values():
    assert average_precision([3, 2, 1], [0, 1, 1]) == pytest.approx(7 / 12)
    assert average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 0, 1]) == pytest.approx(0.75)
    assert average_precision([1, 2, 3], [1, 1, 1]) == 1.0


def test_average_precision_ties_keep_input_order():
    assert average_precision([1, 1], [0, 1]) == pytest.approx(0.5)
    assert average_precision([1, 1], [1, 0]) == pytest.approx(1.0)


def test_average_precision_needs_a_positive():
    with pytest.raises(DataError):
        average_precision([1, 2], [0, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10, allow_nan=False), st.booleans()), min_size=1, max_size=30))
def test_average_precision_against_definition(pairs):
    scores = np.array([p[0] for p in pairs])
    rel = np.array([p[1] for p in pairs])
    if not rel.any():
        return
    order = sorted(range(len(pairs)), key=lambda i: -scores[i])  # sorted() is stable
    hits, total = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if rel[i]:
            hits += 1
            total += hits / rank
    assert average_precision(scores, rel) == pytest.approx(total / rel.sum(), rel=1e-12)
    assert 0 < average_precision(scores, rel) <= 1


class _Fixed:
    def __init__(self, S):
        self.S = np.asarray(S, dtype=float)

    def decision_function(self, X):
        return self.S


def test_evaluate_mAcc_and_csv():
    S = [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]]
    report = evaluate(_Fixed(S), np.zeros((4, 1)), [0, 1, 1, 1], "mAcc")
    assert report.mean_accuracy == pytest.approx(0.75)
    assert report.per_class_accuracy == {0: 1.0, 1: pytest.approx(2 / 3)}
    lines = report.to_csv().strip().splitlines()
    assert lines[0] == "class,ap,accuracy,sd"
    assert len(lines) == 1 + 2 + 1
    assert lines[-1].startswith("all,")
    assert "protocol: mAcc" in report.to_text()


def test_evaluate_mAP_plus_skips_negative_class():
    S = np.eye(3)
    report = evaluate(_Fixed(S), np.zeros((3, 1)), [0, 1, 2], "mAP+", negative_class=0)
    assert sorted(report.per_class_ap) == [1, 2]
    assert report.mAP == 1.0 and report.mean_accuracy is None


def test_evaluate_splits_std_is_population():
    a = (_Fixed([[1, 0], [0, 1]]), np.zeros((2, 1)), [0, 1])
    b = (_Fixed([[1, 0], [1, 0]]), np.zeros((2, 1)), [0, 1])
    report = evaluate_splits([a, b], "mAcc")
    assert report.split_accuracies == [1.0, 0.5]
    assert report.std_accuracy == pytest.approx(0.25)


def test_evaluate_protocol_errors():
    with pytest.raises(DataError):
        evaluate(_Fixed(np.eye(2)), np.zeros((2, 1)), [0, 1], "top5")
    with pytest.raises(DataError):
        evaluate(_Fixed(np.eye(2)), np.zeros((2, 1)), [{0, 1}, {1}], "mAcc")


def test_label_matrix():
    Y = label_matrix([{0, 2}, 1, frozenset()], 3)
    np.testing.assert_array_equal(Y, [[1, 0, 1], [0, 1, 0], [0, 0, 0]])
    with pytest.raises(DataError):
        label_matrix([5], 3)


def test_report_rows_have_four_columns():
    r = EvalReport("mAP", {0: 0.5}, 0.5, [])
    assert all(len(row) == 4 for row in r.to_rows())
