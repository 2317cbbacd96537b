"""PCA by covariance or Gram-matrix eigendecomposition, whitening, and the
frozen dimensionality-reduction layer built from it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

RANK_TOL = 1e-10


class RankDeficientError(NumericError):
    pass


@dataclass(frozen=True, eq=False)
class ReductionModel:
    """``basis`` rows are orthonormal principal directions (r x d);
    ``eigvals`` are the matching population variances, descending."""

    mean: np.ndarray
    basis: np.ndarray
    eigvals: np.ndarray
    whiten: bool = False

    @property
    def r(self) -> int:
        return self.basis.shape[0]

    @property
    def d(self) -> int:
        return self.basis.shape[1]


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(basis.shape[0]), idx])
    signs[signs == 0] = 1.0
    return basis * signs[:, None]


def _choose_r(eigvals: np.ndarray, r) -> int:
    """``r`` is an int dimension or a float variance fraction in (0, 1]."""
    rank = eigvals.size
    if isinstance(r, (float, np.floating)):
        if not 0 < r <= 1:
            raise DataError(f"variance fraction must lie in (0, 1], got {r}")
        cum = np.cumsum(eigvals) / eigvals.sum()
        return int(min(np.searchsorted(cum, r - 1e-12) + 1, rank))
    r = int(r)
    if r < 1:
        raise DataError("target dimension must be >= 1")
    if r > rank:
        raise RankDeficientError(f"requested r={r} exceeds the numerical rank {rank}")
    return r


def pca_fit(X, r, whiten: bool = False, method: str = "auto") -> ReductionModel:
    """Fit PCA on the rows of ``X`` (n samples x d features).

    ``method`` is ``"covariance"`` (d x d eigenproblem), ``"gram"`` (n x n
    eigenproblem on the centered Gram matrix, cheaper when n < d) or
    ``"auto"`` (covariance when n >= d). Variances use the population
    normalization (divide by n).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("PCA input must be a matrix")
    n, d = X.shape
    if n < 2:
        raise DataError("PCA needs at least 2 samples")
    if isinstance(r, (int, np.integer)) and r > min(n - 1, d):
        raise RankDeficientError(f"requested r={r} exceeds min(n-1, d) = {min(n - 1, d)}")
    if method == "auto":
        method = "covariance" if n >= d else "gram"
    mean = X.mean(axis=0)
    Xc = X - mean

    if method == "covariance":
        lam, vecs = np.linalg.eigh(Xc.T @ Xc / n)
        order = np.argsort(lam)[::-1]
        lam, vecs = lam[order], vecs[:, order]
        keep = lam > RANK_TOL * max(lam[0], 0.0)
        lam, basis = lam[keep], vecs[:, keep].T
    elif method == "gram":
        lam_g, V = np.linalg.eigh(Xc @ Xc.T)
        order = np.argsort(lam_g)[::-1]
        lam_g, V = lam_g[order], V[:, order]
        keep = lam_g > RANK_TOL * max(lam_g[0], 0.0)
        lam_g, V = lam_g[keep], V[:, keep]
        # P = V^t X^t Lambda^{-1/2}: unit-norm principal directions
        basis = (Xc.T @ V / np.sqrt(lam_g)).T
        lam = lam_g / n
    else:
        raise DataError(f"unknown PCA method {method!r}")
    if lam.size == 0:
        raise RankDeficientError("data has zero variance")

    k = _choose_r(lam, r)
    return ReductionModel(
        mean=mean,
        basis=np.ascontiguousarray(_fix_signs(basis[:k])),
        eigvals=lam[:k].copy(),
        whiten=whiten,
    )


def project(model: ReductionModel, rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[-1] != model.d:
        raise DataError(f"input dimension {rows.shape[-1]} != PCA dimension {model.d}")
    Z = (rows - model.mean) @ model.basis.T
    if model.whiten:
        Z = Z / np.sqrt(model.eigvals)
    return Z


def back_project(model: ReductionModel, Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if model.whiten:
        Z = Z * np.sqrt(model.eigvals)
    return Z @ model.basis + model.mean


@dataclass(frozen=True, eq=False)
class ReductionLayer:
    """Affine map followed by l2 normalization; never trained."""

    weight: np.ndarray  # (r, d)
    offset: np.ndarray  # (r,)
    trainable: bool = False

    def apply(self, X) -> np.ndarray:
        H = np.asarray(X, dtype=np.float64) @ self.weight.T + self.offset
        norms = np.linalg.norm(H, axis=-1, keepdims=True)
        return H / np.where(norms > 0, norms, 1.0)


def reduction_layer_weights(model: ReductionModel) -> ReductionLayer:
    """Whitening weights W1 = diag(eigvals)^{-1/2} P and offset -W1 mean.

    With the Gram route this equals V^t X^t Lambda_gram^{-1} sqrt(n).
    """
    if not model.whiten:
        raise DataError("the reduction layer requires a whitened PCA model")
    W = model.basis / np.sqrt(model.eigvals)[:, None]
    return ReductionLayer(weight=W, offset=-(W @ model.mean))
