import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvstack.errors import DataError, NumericError
from fvstack.reduction import (
    RankDeficientError,
    back_project,
    pca_fit,
    project,
    reduction_layer_weights,
)


def test_known_two_dimensional_case():
    # points on the line y = x: one direction (1, 1)/sqrt(2) with variance 2
    X = np.array([[-2.0, -2.0], [0.0, 0.0], [2.0, 2.0], [-1.0, -1.0], [1.0, 1.0]])
    m = pca_fit(X, 1)
    np.testing.assert_allclose(m.basis, [[0.7071067811865476, 0.7071067811865476]])
    np.testing.assert_allclose(m.eigvals, [4.0])  # projections +-2sqrt2, +-sqrt2, 0


def test_eigvals_use_population_variance(rng):
    X = rng.standard_normal((50, 4)) * [3.0, 2.0, 1.0, 0.5]
    m = pca_fit(X, 4)
    np.testing.assert_allclose(np.sort(m.eigvals)[::-1], m.eigvals)
    np.testing.assert_allclose(m.eigvals.sum(), X.var(axis=0).sum(), rtol=1e-12)


def test_sign_convention(rng):
    m = pca_fit(rng.standard_normal((30, 6)), 4)
    idx = np.argmax(np.abs(m.basis), axis=1)
    assert np.all(m.basis[np.arange(4), idx] > 0)


@pytest.mark.parametrize("n,d", [(40, 10), (8, 30), (12, 12)])
def test_gram_and_covariance_paths_agree(rng, n, d):
    X = rng.standard_normal((n, d))
    r = min(n - 1, d) - 1
    a = pca_fit(X, r, method="covariance")
    b = pca_fit(X, r, method="gram")
    np.testing.assert_allclose(a.eigvals, b.eigvals, rtol=1e-9)
    np.testing.assert_allclose(np.abs(project(a, X)), np.abs(project(b, X)), atol=1e-8)


def test_variance_fraction(rng):
    X = rng.standard_normal((200, 3)) * [10.0, 1.0, 0.1]
    assert pca_fit(X, 0.9).r == 1
    assert pca_fit(X, 0.999).r == 2
    assert pca_fit(X, 1.0).r == 3


def test_whitening(rng):
    X = rng.standard_normal((100, 5)) @ rng.standard_normal((5, 5))
    m = pca_fit(X, 5, whiten=True)
    Z = project(m, X)
    np.testing.assert_allclose(Z.T @ Z / 100, np.eye(5), atol=1e-10)
    np.testing.assert_allclose(back_project(m, Z), X, atol=1e-9)


def test_back_projection_of_full_rank_is_identity(rng):
    X = rng.standard_normal((20, 4))
    m = pca_fit(X, 4)
    np.testing.assert_allclose(back_project(m, project(m, X)), X, atol=1e-12)


def test_rank_errors(rng):
    X = rng.standard_normal((5, 10))
    with pytest.raises(RankDeficientError):
        pca_fit(X, 5)
    assert isinstance(RankDeficientError("x"), NumericError)
    low_rank = np.outer(rng.standard_normal(20), rng.standard_normal(6))
    with pytest.raises(RankDeficientError):
        pca_fit(low_rank, 3)
    with pytest.raises(RankDeficientError):
        pca_fit(np.ones((4, 3)), 0.5)
    with pytest.raises(DataError):
        pca_fit(X, 2, method="svd")
    with pytest.raises(DataError):
        pca_fit(X[:1], 1)


def test_reduction_layer(rng):
    X = rng.standard_normal((12, 40))
    m = pca_fit(X, 8, whiten=True)
    layer = reduction_layer_weights(m)
    assert layer.weight.shape == (8, 40) and not layer.trainable
    H = layer.apply(X)
    Z = project(m, X)
    np.testing.assert_allclose(H, Z / np.linalg.norm(Z, axis=1, keepdims=True), atol=1e-12)
    with pytest.raises(DataError):
        reduction_layer_weights(pca_fit(X, 8))


def test_reduction_layer_gram_closed_form(rng):
    # W1 = V^t X^t Lambda^-1 sqrt(n) for the centered data X and Gram eigenpairs
    n, d, r = 10, 30, 6
    X = rng.standard_normal((n, d))
    m = pca_fit(X, r, whiten=True, method="gram")
    Xc = X - X.mean(0)
    lam, V = np.linalg.eigh(Xc @ Xc.T)
    lam, V = lam[::-1][:r], V[:, ::-1][:, :r]
    W = (Xc.T @ V / lam * np.sqrt(n)).T
    got = reduction_layer_weights(m).weight
    np.testing.assert_allclose(np.abs(got), np.abs(W), rtol=1e-8, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 30), d=st.integers(2, 30), seed=st.integers(0, 10_000))
def test_projection_is_orthonormal(n, d, seed):
    X = np.random.default_rng(seed).standard_normal((n, d))
    m = pca_fit(X, min(n - 1, d))
    np.testing.assert_allclose(m.basis @ m.basis.T, np.eye(m.r), atol=1e-8)
