"""C-SVC on precomputed Gram matrices, trained by SMO, plus CV hyperparameter search."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .kernels import KernelSpec, distance_matrix, gram, kernel_from_distance

log = logging.getLogger(__name__)

KKT_TOL = 1e-3
TAU = 1e-12
C_GRID = tuple(2.0 ** e for e in range(-5, 16, 2))
GAMMA_GRID = tuple(2.0 ** e for e in range(-15, 4, 2))


class SvmError(ValueError):
    pass


@numba.njit(cache=True, nogil=True)
def _smo(K, y, C, tol, max_iter):
    """Maximal-violating-pair SMO for the C-SVC dual.

    min 1/2 a'Qa - e'a  s.t. 0 <= a <= C, y'a = 0,  Q_ij = y_i y_j K_ij.
    Returns (alpha, gradient, final KKT gap, iterations).
    """
    n = K.shape[0]
    alpha = np.zeros(n)
    G = -np.ones(n)
    gap = np.inf
    it = 0
    while it < max_iter:
        # i maximises -y G over I_up, j minimises it over I_low; first index wins ties
        i = -1
        j = -1
        gmax = -np.inf
        gmin = np.inf
        for t in range(n):
            v = -y[t] * G[t]
            if (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0):
                if v > gmax:
                    gmax = v
                    i = t
            if (y[t] < 0 and alpha[t] < C) or (y[t] > 0 and alpha[t] > 0):
                if v < gmin:
                    gmin = v
                    j = t
        gap = gmax - gmin
        if i < 0 or j < 0 or gap < tol:
            break
        a = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if a <= 0:
            a = TAU
        d = gap / a
        # a_i moves by y_i d and a_j by -y_j d; clip to the box
        lim_i = C - alpha[i] if y[i] > 0 else alpha[i]
        lim_j = alpha[j] if y[j] > 0 else C - alpha[j]
        hit_i = False
        hit_j = False
        if d >= lim_i or d >= lim_j:
            if lim_i <= lim_j:
                d = lim_i
                hit_i = True
                hit_j = lim_j == lim_i
            else:
                d = lim_j
                hit_j = True
        da_i = y[i] * d
        da_j = -y[j] * d
        ai = alpha[i] + da_i
        aj = alpha[j] + da_j
        if hit_i:
            ai = C if y[i] > 0 else 0.0
        if hit_j:
            aj = 0.0 if y[j] > 0 else C
        da_i = ai - alpha[i]
        da_j = aj - alpha[j]
        alpha[i] = ai
        alpha[j] = aj
        for t in range(n):
            G[t] += y[t] * (y[i] * K[t, i] * da_i + y[j] * K[t, j] * da_j)
        it += 1
    return alpha, G, gap, it


def _bias(alpha, G, y, C):
    yG = y * G
    free = (alpha > 0) & (alpha < C)
    if np.any(free):
        rho = float(np.mean(yG[free]))
    else:
        at_up = alpha >= C
        at_lo = alpha <= 0
        ub_mask = (at_up & (y < 0)) | (at_lo & (y > 0))
        lb_mask = (at_up & (y > 0)) | (at_lo & (y < 0))
        ub = float(np.min(yG[ub_mask])) if np.any(ub_mask) else np.inf
        lb = float(np.max(yG[lb_mask])) if np.any(lb_mask) else -np.inf
        rho = 0.5 * (ub + lb)
    return -rho


@dataclass
class SvmModel:
    """Trained binary detector.

    ``dual_coef[i]`` is alpha_i * y_i for training point ``support[i]``;
    the decision value is ``K(x, SV) @ dual_coef + bias``.
    """
    dual_coef: np.ndarray
    bias: float
    C: float
    kernel: KernelSpec
    support: np.ndarray
    support_ids: list = field(default_factory=list)
    support_vectors: np.ndarray | None = None
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None
    kkt_gap: float = 0.0
    n_iter: int = 0

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.feature_mean is not None:
            X = (X - self.feature_mean) / self.feature_scale
        return X

    def decision_function(self, X) -> np.ndarray:
        """Scores for raw (untransformed) feature vectors."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[0] == 0:
            return np.zeros(0)
        if self.support_vectors is None:
            raise SvmError("model was saved without support vectors")
        return decision_scores(self, gram(self.kernel, self.transform(X), self.support_vectors))

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {
            "dual_coef": arr(self.dual_coef), "bias": self.bias, "C": self.C,
            "kernel": {"kind": self.kernel.kind, "gamma": self.kernel.gamma},
            "support": arr(self.support), "support_ids": list(self.support_ids),
            "support_vectors": arr(self.support_vectors),
            "feature_mean": arr(self.feature_mean), "feature_scale": arr(self.feature_scale),
            "kkt_gap": self.kkt_gap, "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SvmModel":
        def arr(a, dtype=np.float64):
            return None if a is None else np.asarray(a, dtype=dtype)
        return cls(
            dual_coef=arr(d["dual_coef"]), bias=float(d["bias"]), C=float(d["C"]),
            kernel=KernelSpec(**d["kernel"]), support=arr(d["support"], np.int64),
            support_ids=list(d.get("support_ids", [])),
            support_vectors=arr(d.get("support_vectors")),
            feature_mean=arr(d.get("feature_mean")), feature_scale=arr(d.get("feature_scale")),
            kkt_gap=float(d.get("kkt_gap", 0.0)), n_iter=int(d.get("n_iter", 0)),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "SvmModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise SvmError("labels must be +1/-1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise SvmError("training labels contain a single class")
    return y


def train_csvc(K, y, C: float, kernel: KernelSpec = KernelSpec("linear"), *,
               tol: float = KKT_TOL, max_iter: int | None = None, ids=None,
               support_vectors=None) -> SvmModel:
    """Solve the soft-margin dual on a precomputed training Gram matrix.

    Args:
        K: (n, n) symmetric kernel matrix.
        y: labels in {+1, -1}.
        C: box constraint.
        kernel: recorded on the model for scoring new data.
        ids: optional training identifiers, kept for the support set.
        support_vectors: optional (n, p) training features; the rows of the
            support set are stored so the model can score raw features.
    """
    K = np.ascontiguousarray(K, dtype=np.float64)
    y = _labels(y)
    n = len(y)
    if K.shape != (n, n):
        raise SvmError(f"Gram matrix shape {K.shape} does not match {n} labels")
    if not np.array_equal(K, K.T):
        if not np.allclose(K, K.T, rtol=1e-12, atol=1e-12):
            raise SvmError("Gram matrix is not symmetric")
        K = 0.5 * (K + K.T)
    if not C > 0:
        raise SvmError("C must be positive")
    if max_iter is None:
        max_iter = max(10_000_000, 100 * n)
    alpha, G, gap, it = _smo(K, y, float(C), float(tol), int(max_iter))
    if gap >= tol:
        warnings.warn(f"SMO stopped at iteration cap with KKT gap {gap:.3g}")
    sv = np.flatnonzero(alpha > 0)
    return SvmModel(
        dual_coef=alpha[sv] * y[sv], bias=_bias(alpha, G, y, C), C=float(C), kernel=kernel,
        support=sv, support_ids=[ids[i] for i in sv] if ids is not None else [],
        support_vectors=None if support_vectors is None else np.asarray(support_vectors, dtype=np.float64)[sv],
        kkt_gap=float(gap), n_iter=int(it),
    )


def decision_scores(model: SvmModel, K_test) -> np.ndarray:
    """f(x) = sum_i alpha_i y_i K(x, s_i) + b for rows of a (test x support) Gram matrix."""
    K_test = np.asarray(K_test, dtype=np.float64)
    if K_test.size == 0 and (K_test.ndim < 2 or K_test.shape[0] == 0):
        return np.zeros(0)
    K_test = np.atleast_2d(K_test)
    if K_test.shape[1] != len(model.dual_coef):
        raise SvmError(f"{K_test.shape[1]} kernel columns for {len(model.dual_coef)} support vectors")
    return K_test @ model.dual_coef + model.bias


def dual_objective(K, y, alpha) -> float:
    y = np.asarray(y, dtype=np.float64)
    ay = np.asarray(alpha) * y
    return float(0.5 * ay @ np.asarray(K) @ ay - np.sum(alpha))


def full_alpha(model: SvmModel, n: int) -> np.ndarray:
    """Dense alpha vector (nonnegative) over the n training points."""
    a = np.zeros(n)
    a[model.support] = np.abs(model.dual_coef)
    return a


# ---------------------------------------------------------------------------
# hyperparameter search

@dataclass
class CvGrid:
    C: tuple = C_GRID
    gamma: tuple = GAMMA_GRID
    n_folds: int = 3

    def __post_init__(self):
        self.C = tuple(sorted(float(c) for c in self.C))
        self.gamma = tuple(sorted(float(g) for g in self.gamma))
        if not self.C or not self.gamma:
            raise ValueError("empty hyperparameter grid")
        if self.n_folds < 2:
            raise ValueError("need at least 2 inner folds")


def stratified_folds(y, n_folds: int, seed: int) -> np.ndarray:
    """Fold index per sample; each class is shuffled and dealt round-robin."""
    y = np.asarray(y)
    folds = np.empty(len(y), dtype=np.int64)
    rng = np.random.default_rng(seed)
    for cls in (1.0, -1.0):
        idx = np.flatnonzero(y == cls)
        if len(idx) < n_folds:
            raise SvmError(f"class {cls:+.0f} has {len(idx)} samples, fewer than {n_folds} inner folds")
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = np.arange(len(idx)) % n_folds
    return folds


def _ap(scores, labels):
    from .evaluation import average_precision
    return average_precision(scores, labels > 0)


def grid_search_cv(features, labels, kind: str, grid: CvGrid = CvGrid(), seed: int = 0,
                   tol: float = KKT_TOL) -> tuple[float, float | None]:
    """Pick (C, gamma) maximising mean inner-fold AP.

    Ties go to the smaller C, then the smaller gamma. gamma is None for the
    linear kernel.
    """
    X = np.asarray(features, dtype=np.float64)
    y = _labels(labels)
    folds = stratified_folds(y, grid.n_folds, seed)
    gammas = (None,) if kind == "linear" else grid.gamma
    if kind == "linear":
        full = gram(KernelSpec("linear"), X)
    else:
        dist = distance_matrix(kind, X)

    best, best_score = None, -np.inf
    for C in grid.C:
        for g in gammas:
            K = full if g is None else kernel_from_distance(dist, g)
            aps = []
            for f in range(grid.n_folds):
                tr = folds != f
                te = ~tr
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    m = train_csvc(K[np.ix_(tr, tr)], y[tr], C, tol=tol)
                s = decision_scores(m, K[np.ix_(te, np.flatnonzero(tr)[m.support])])
                aps.append(_ap(s, y[te]))
            score = float(np.mean(aps))
            if score > best_score:
                best, best_score = (C, g), score
    log.debug("grid search (%s): best C=%g gamma=%s inner AP=%.4f", kind, best[0], best[1], best_score)
    return best


def standardizer(X) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and scale; constant dimensions get scale 1."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd <= 1e-12] = 1.0
    return mu, sd


def train_event_detector(event, X, labels, kind: str, grid: CvGrid = CvGrid(), seed: int = 0,
                         standardize: bool = False, ids=None, tol: float = KKT_TOL) -> SvmModel:
    """One-vs-rest detector for ``event`` on training features ``X``.

    Clips labelled ``event`` are positives, everything else negatives.
    With ``standardize`` the features are z-scored with statistics of ``X``
    (the training folds only); the parameters travel with the model.
    """
    labels = np.asarray(labels)
    y = np.where(labels == event, 1.0, -1.0)
    if not np.any(y > 0):
        raise SvmError(f"event {event!r} has no clips in the training folds")
    X = np.asarray(X, dtype=np.float64)
    mu = sd = None
    if standardize:
        mu, sd = standardizer(X)
        X = (X - mu) / sd
    C, g = grid_search_cv(X, y, kind, grid, seed, tol=tol)
    spec = KernelSpec(kind, g)
    model = train_csvc(gram(spec, X), y, C, spec, tol=tol, ids=ids, support_vectors=X)
    model.feature_mean, model.feature_scale = mu, sd
    return model
