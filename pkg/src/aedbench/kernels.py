"""Linear, RBF and exponential chi-square kernels and blocked Gram matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

KINDS = ("linear", "rbf", "expchi2")
SHORT_NAMES = {"linear": "LK", "rbf": "RK", "expchi2": "CK"}
TILE = 256

# the system TBB is too old for numba; prefer OpenMP
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "linear"
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind != "linear" and not (self.gamma is not None and self.gamma > 0):
            raise ValueError(f"{self.kind} kernel needs gamma > 0")


def chi2_distance(f, g) -> float:
    """sum (f_i - g_i)^2 / (f_i + g_i), with 0/0 terms counted as 0."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    den = f + g
    num = (f - g) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(np.sum(terms))


def _check_pair(spec: KernelSpec, f, g):
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape or f.ndim != 1:
        raise ValueError(f"dimension mismatch: {f.shape} vs {g.shape}")
    if spec.kind == "expchi2" and (np.any(f < 0) or np.any(g < 0)):
        raise ValueError("exponential chi-square kernel needs nonnegative features")
    return f, g


def kernel_eval(spec: KernelSpec, f, g) -> float:
    f, g = _check_pair(spec, f, g)
    if spec.kind == "linear":
        return float(f @ g)
    if spec.kind == "rbf":
        return float(np.exp(-spec.gamma * np.sum((f - g) ** 2)))
    return float(np.exp(-spec.gamma * chi2_distance(f, g)))


def _as_set(F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[None, :]
    if F.ndim != 2:
        raise ValueError("feature set must be (n, p)")
    return F


@numba.njit(parallel=True, cache=True)
def _chi2_tile(A, B):
    out = np.empty((A.shape[0], B.shape[0]))
    for i in numba.prange(A.shape[0]):
        for j in range(B.shape[0]):
            acc = 0.0
            for d in range(A.shape[1]):
                den = A[i, d] + B[j, d]
                if den > 0.0:
                    diff = A[i, d] - B[j, d]
                    acc += diff * diff / den
            out[i, j] = acc
    return out


@numba.njit(parallel=True, cache=True)
def _sqeuclid_tile(A, B):
    out = np.empty((A.shape[0], B.shape[0]))
    for i in numba.prange(A.shape[0]):
        for j in range(B.shape[0]):
            acc = 0.0
            for d in range(A.shape[1]):
                diff = A[i, d] - B[j, d]
                acc += diff * diff
            out[i, j] = acc
    return out


def distance_matrix(kind: str, rows, cols=None, tile: int = TILE) -> np.ndarray:
    """Pairwise squared-Euclidean ("rbf") or chi-square ("expchi2") distances.

    Computed tile by tile; each entry is a sequential sum over dimensions,
    so the result does not depend on the tiling or thread count. When
    ``cols`` is None only upper tiles are computed and mirrored.
    """
    A = _as_set(rows)
    square = cols is None
    B = A if square else _as_set(cols)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if kind == "expchi2":
        if np.any(A < 0) or np.any(B < 0):
            raise ValueError("exponential chi-square kernel needs nonnegative features")
        fn = _chi2_tile
    elif kind == "rbf":
        fn = _sqeuclid_tile
    else:
        raise ValueError(f"no distance for kernel kind {kind!r}")
    n, m = A.shape[0], B.shape[0]
    out = np.empty((n, m))
    for i in range(0, n, tile):
        j0 = i if square else 0
        for j in range(j0, m, tile):
            blk = fn(np.ascontiguousarray(A[i:i + tile]), np.ascontiguousarray(B[j:j + tile]))
            out[i:i + tile, j:j + tile] = blk
            if square and j != i:
                out[j:j + tile, i:i + tile] = blk.T
    if square:
        np.fill_diagonal(out, 0.0)
    return out


def kernel_from_distance(D: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * D)


def gram(spec: KernelSpec, rows, cols=None, tile: int = TILE) -> np.ndarray:
    """Kernel matrix between two feature sets (square and symmetric if ``cols`` is None)."""
    A = _as_set(rows)
    if spec.kind == "linear":
        B = A if cols is None else _as_set(cols)
        if A.shape[1] != B.shape[1]:
            raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
        K = A @ B.T
        if cols is None:
            K = np.triu(K) + np.triu(K, 1).T
        return K
    return kernel_from_distance(distance_matrix(spec.kind, A, cols, tile), spec.gamma)
