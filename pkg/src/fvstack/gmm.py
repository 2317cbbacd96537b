"""Diagonal-covariance Gaussian mixtures fit with EM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DataError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    stds: np.ndarray  # (K, D)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        sd = np.atleast_2d(np.asarray(self.stds, dtype=np.float64))
        if mu.shape != sd.shape or mu.shape[0] != w.shape[0]:
            raise DataError(f"inconsistent GMM shapes {w.shape}, {mu.shape}, {sd.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DataError("GMM weights must be positive and sum to 1")
        if np.any(sd <= 0) or not np.all(np.isfinite(mu)):
            raise DataError("GMM stds must be positive and means finite")
        for name, arr in (("weights", w), ("means", mu), ("stds", sd)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class FitConfig:
    K: int = 256
    em_iters: int = 10
    sample_size: int = 256_000
    seed: int = 0
    variance_floor: float = 1e-4  # relative to the global per-column variance

    def __post_init__(self):
        if self.K < 1 or self.em_iters < 1 or self.sample_size < self.K:
            raise DataError("need K >= 1, em_iters >= 1 and sample_size >= K")
        if self.variance_floor <= 0:
            raise DataError("variance_floor must be positive")


def sample_training_pool(sets, channel: str, n: int, seed: int, with_coords: bool = False):
    """Draw ``n`` trajectory rows of one channel from a pool of videos.

    Sampling is uniform without replacement when the pool is large enough
    and with replacement otherwise. Labels are ignored.
    """
    blocks, coords = [], []
    for dset in sets:
        blocks.append(dset.channel(channel))
        coords.append(dset.coords)
    pool = np.concatenate(blocks) if blocks else np.empty((0, 0))
    total = pool.shape[0]
    if total < 1:
        raise DataError("training pool is empty")
    rng = np.random.default_rng(seed)
    idx = rng.choice(total, size=n, replace=n > total)
    rows = pool[idx].astype(np.float64)
    if with_coords:
        return rows, np.concatenate(coords)[idx].astype(np.float64)
    return rows


def _check_dim(model: GmmModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.dim:
        raise DataError(f"descriptor dimension {X.shape[-1]} != model dimension {model.dim}")
    return X


def _log_joint(model: GmmModel, X: np.ndarray) -> np.ndarray:
    """(n, K) matrix of log w_k + log N(x; mu_k, sigma_k^2)."""
    prec = 1.0 / model.stds**2
    const = (
        np.log(model.weights)
        - 0.5 * model.dim * LOG_2PI
        - np.log(model.stds).sum(axis=1)
        - 0.5 * np.sum(model.means**2 * prec, axis=1)
    )
    return const + X @ (model.means * prec).T - 0.5 * (X**2) @ prec.T


def posterior(model: GmmModel, x) -> np.ndarray:
    """Soft assignments; a row gives a (K,) vector, a matrix gives (n, K)."""
    X = _check_dim(model, x)
    lj = _log_joint(model, np.atleast_2d(X))
    gamma = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return gamma[0] if X.ndim == 1 else gamma


def log_likelihood(model: GmmModel, data) -> float:
    X = np.atleast_2d(_check_dim(model, data))
    return float(logsumexp(_log_joint(model, X), axis=1).sum())


def _kmeanspp(X: np.ndarray, K: int, rng) -> np.ndarray:
    """Greedy k-means++ seeding: each step draws a few D^2-weighted candidates
    and keeps the one that lowers the total squared distance most."""
    n = X.shape[0]
    trials = 2 + int(np.log(K))
    sq = np.sum(X**2, axis=1)
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total > 0:
            cand = rng.choice(n, size=trials, p=d2 / total)
        else:
            cand = rng.integers(n, size=trials)
        dc = sq[None, :] - 2 * X[cand] @ X.T + sq[cand][:, None]
        dc = np.minimum(d2[None, :], np.maximum(dc, 0.0))
        best = int(np.argmin(dc.sum(axis=1)))
        centers[k] = X[cand[best]]
        d2 = dc[best]
    return centers


def _initial_model(X: np.ndarray, cfg: FitConfig, rng, var_floor: np.ndarray) -> GmmModel:
    centers = _kmeanspp(X, cfg.K, rng)
    d2 = (X**2).sum(1)[:, None] - 2 * X @ centers.T + (centers**2).sum(1)[None, :]
    hard = np.argmin(d2, axis=1)
    counts = np.bincount(hard, minlength=cfg.K).astype(np.float64)
    var = np.empty_like(centers)
    global_var = X.var(axis=0)
    for k in range(cfg.K):
        members = X[hard == k]
        var[k] = ((members - centers[k]) ** 2).mean(axis=0) if len(members) > 1 else global_var
    var = np.maximum(var, var_floor)
    counts = np.maximum(counts, 1.0)
    return GmmModel(counts / counts.sum(), centers, np.sqrt(var))


def em_trace(data, cfg: FitConfig):
    """Fit a GMM and return ``(model, lls)`` where ``lls[i]`` is the training
    log-likelihood after ``i`` EM iterations (``lls[0]`` is the initialization).
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("GMM training data must be a non-empty matrix")
    n = X.shape[0]
    if cfg.K > n:
        raise DataError(f"K={cfg.K} exceeds the number of training rows ({n})")
    if not np.all(np.isfinite(X)):
        raise DataError("GMM training data contains non-finite values")

    rng = np.random.default_rng(cfg.seed)
    global_var = X.var(axis=0)
    var_floor = cfg.variance_floor * np.where(global_var > 0, global_var, 1.0)
    model = _initial_model(X, cfg, rng, var_floor)

    lj = _log_joint(model, X)
    lse = logsumexp(lj, axis=1, keepdims=True)
    lls = [float(lse.sum())]
    for _ in range(cfg.em_iters):
        resp = np.exp(lj - lse)
        nk = resp.sum(axis=0)
        empty = nk < 1e-10 * n
        nk_safe = np.where(empty, 1.0, nk)
        means = (resp.T @ X) / nk_safe[:, None]
        var = (resp.T @ X**2) / nk_safe[:, None] - means**2
        var = np.maximum(var, var_floor)
        weights = nk / n
        if np.any(empty):
            # re-seed dead components on the worst-explained rows, keeping their weight negligible
            worst = np.argsort(lse.ravel(), kind="stable")
            for j, k in enumerate(np.flatnonzero(empty)):
                means[k] = X[worst[j % n]]
                var[k] = np.maximum(global_var, var_floor)
                weights[k] = max(weights[k], 1e-12)
        model = GmmModel(weights / weights.sum(), means, np.sqrt(var))
        lj = _log_joint(model, X)
        lse = logsumexp(lj, axis=1, keepdims=True)
        lls.append(float(lse.sum()))
    return model, lls


def gmm_fit(data, cfg: FitConfig) -> GmmModel:
    return em_trace(data, cfg)[0]
