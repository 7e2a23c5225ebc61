"""Diagonal-covariance Gaussian mixture: k-means++ / EM training and posteriors."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)

# frames per E-step block; sums are accumulated block by block in a fixed order
CHUNK = 32768


class DegenerateDataWarning(UserWarning):
    """Training frames carry (almost) no variance in some dimension."""


@dataclass
class DiagGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    var_floor: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        M, D = self.means.shape
        if self.weights.shape != (M,) or self.variances.shape != (M, D):
            raise ValueError("inconsistent GMM parameter shapes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")
        if self.var_floor is None:
            self.var_floor = np.zeros(D)
        self.var_floor = np.broadcast_to(np.asarray(self.var_floor, dtype=np.float64), (D,)).copy()

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def permuted(self, order) -> "DiagGmm":
        order = np.asarray(order)
        return DiagGmm(self.weights[order], self.means[order], self.variances[order], self.var_floor)

    def save(self, path):
        """Write the flat text format (see :func:`load_gmm`)."""
        M, D = self.means.shape
        with open(path, "w") as f:
            f.write(f"{M} {D}\n")
            np.savetxt(f, self.weights[None, :], fmt="%.17g")
            np.savetxt(f, self.means, fmt="%.17g")
            np.savetxt(f, self.variances, fmt="%.17g")
            np.savetxt(f, self.var_floor[None, :], fmt="%.17g")


def load_gmm(path) -> DiagGmm:
    """Read a model written by :meth:`DiagGmm.save`.

    Layout: a header line ``M D``, one line of M weights, M lines of means,
    M lines of variances and one line of D variance floors; whitespace
    separated, 17 significant digits so the round trip is exact.
    """
    with open(path) as f:
        try:
            M, D = (int(v) for v in f.readline().split())
            body = np.array(f.read().split(), dtype=np.float64)
        except ValueError as e:
            raise ValueError(f"{path}: malformed model file: {e}") from e
    expect = M + 2 * M * D + D
    if body.size != expect:
        raise ValueError(f"{path}: expected {expect} values, found {body.size}")
    w = body[:M]
    mu = body[M:M + M * D].reshape(M, D)
    var = body[M + M * D:M + 2 * M * D].reshape(M, D)
    floor = body[M + 2 * M * D:]
    return DiagGmm(w, mu, var, floor)


@dataclass
class GmmTrainConfig:
    n_components: int = 32
    max_iter: int = 100
    tol: float = 1e-5
    var_floor_frac: float = 1e-3
    kmeans_iter: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


def _check_frames(g: DiagGmm, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != g.dim:
        raise ValueError(f"frame dimension {X.shape[1]} != model dimension {g.dim}")
    return X


def log_joint(g: DiagGmm, X: np.ndarray) -> np.ndarray:
    """log w_k + log N(x_t; mu_k, diag var_k), shape (T, M)."""
    X = _check_frames(g, X)
    prec = 1.0 / g.variances
    # quadratic form expanded so the (T, M, D) tensor is never built
    quad = (X ** 2) @ prec.T - 2.0 * X @ (g.means * prec).T + np.sum(g.means ** 2 * prec, axis=1)
    const = -0.5 * (g.dim * LOG_2PI + np.sum(np.log(g.variances), axis=1))
    with np.errstate(divide="ignore"):
        logw = np.log(g.weights)
    return logw + const - 0.5 * quad


def posteriors(g: DiagGmm, X: np.ndarray) -> np.ndarray:
    """Pr(k | x_t) for every frame, shape (T, M); rows sum to one."""
    lj = log_joint(g, X)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def posterior(g: DiagGmm, x: np.ndarray) -> np.ndarray:
    """Pr(k | x) for a single D-vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("posterior expects a single frame; use posteriors()")
    return posteriors(g, x)[0]


def log_likelihood(g: DiagGmm, X: np.ndarray) -> float:
    """Mean per-frame log density of the frames under the mixture."""
    X = _check_frames(g, X)
    if X.shape[0] == 0:
        raise ValueError("empty frame set")
    total = 0.0
    for s in range(0, X.shape[0], CHUNK):
        total += float(np.sum(logsumexp(log_joint(g, X[s:s + CHUNK]), axis=1)))
    return total / X.shape[0]


def _kmeanspp(X: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((M, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for k in range(1, M):
        tot = d2.sum()
        if tot <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, tot)))
            idx = min(idx, n - 1)
        centers[k] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[k]) ** 2, axis=1))
    return centers


def _nearest(X, centers):
    cn = np.sum(centers ** 2, axis=1)
    out = np.empty(X.shape[0], dtype=np.int64)
    for s in range(0, X.shape[0], CHUNK):
        blk = X[s:s + CHUNK]
        out[s:s + CHUNK] = np.argmin(cn - 2.0 * blk @ centers.T, axis=1)
    return out


def _lloyd(X, centers, n_iter):
    for _ in range(n_iter):
        lab = _nearest(X, centers)
        counts = np.bincount(lab, minlength=len(centers))
        sums = np.zeros_like(centers)
        np.add.at(sums, lab, X)
        nz = counts > 0
        centers[nz] = sums[nz] / counts[nz, None]
    return centers


def _accumulate(g: DiagGmm, X: np.ndarray):
    """Zeroth/first/second order posterior sums and total log-likelihood."""
    M, D = g.means.shape
    n = np.zeros(M)
    s1 = np.zeros((M, D))
    s2 = np.zeros((M, D))
    ll = 0.0
    for s in range(0, X.shape[0], CHUNK):
        blk = X[s:s + CHUNK]
        lj = log_joint(g, blk)
        lse = logsumexp(lj, axis=1, keepdims=True)
        ll += float(lse.sum())
        p = np.exp(lj - lse)
        n += p.sum(axis=0)
        s1 += p.T @ blk
        s2 += p.T @ (blk ** 2)
    return n, s1, s2, ll / X.shape[0]


def train_gmm(frames: np.ndarray, cfg: GmmTrainConfig = GmmTrainConfig(), trace: list | None = None) -> DiagGmm:
    """Fit a diagonal GMM by seeded k-means++, Lloyd refinement and EM.

    Variances are floored at ``var_floor_frac`` times the per-dimension
    variance of the pooled data, every M-step. If ``trace`` is a list, the
    mean log-likelihood of each EM iteration's starting model is appended.
    """
    X = np.asarray(frames, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("frames must be a (T, D) matrix")
    M = cfg.n_components
    N, D = X.shape
    if N < M:
        raise ValueError(f"{N} frames cannot support {M} components")
    if not np.all(np.isfinite(X)):
        raise ValueError("frames contain non-finite values")

    data_var = X.var(axis=0)
    if np.any(data_var <= 1e-12 * (1.0 + np.abs(X.mean(axis=0)) ** 2)):
        warnings.warn("training frames are constant in at least one dimension; "
                      "variance floor keeps the model non-singular", DegenerateDataWarning)
    floor = np.maximum(cfg.var_floor_frac * data_var, 1e-10)

    if M == 1:
        return DiagGmm(np.ones(1), X.mean(axis=0)[None], np.maximum(data_var, floor)[None], floor)

    rng = np.random.default_rng(cfg.seed)
    centers = _lloyd(X, _kmeanspp(X, M, rng), cfg.kmeans_iter)
    lab = _nearest(X, centers)
    counts = np.bincount(lab, minlength=M).astype(np.float64)
    var = np.empty((M, D))
    for k in range(M):
        var[k] = X[lab == k].var(axis=0) if counts[k] > 1 else data_var
    w = np.maximum(counts, 1.0)
    g = DiagGmm(w / w.sum(), centers, np.maximum(var, floor), floor)

    prev = -np.inf
    for it in range(cfg.max_iter):
        n, s1, s2, ll = _accumulate(g, X)
        if trace is not None:
            trace.append(ll)
        if abs(ll - prev) < cfg.tol:
            break
        prev = ll
        live = n > 1e-10
        mu = g.means.copy()
        var = g.variances.copy()
        mu[live] = s1[live] / n[live, None]
        var[live] = s2[live] / n[live, None] - mu[live] ** 2
        g = DiagGmm(n / n.sum(), mu, np.maximum(var, floor), floor)
    else:
        n, s1, s2, ll = _accumulate(g, X)
        if trace is not None:
            trace.append(ll)
    log.debug("EM stopped after %d iterations, mean log-likelihood %.6f", it + 1, ll)
    return g
