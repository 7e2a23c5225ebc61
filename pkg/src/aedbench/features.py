"""Clip-level GMM features: soft-count histograms and MAP-adapted supervectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gmm import CHUNK, DiagGmm, posteriors

VARIANTS = ("alpha", "beta_m", "beta_s", "beta_sigma", "beta_s_sigma")
BETA_VARIANTS = VARIANTS[1:]

EMPTY_COUNT = 1e-10
DEFAULT_RELEVANCE = 20.0


@dataclass
class FeatureVector:
    variant: str
    n_components: int
    values: np.ndarray


@dataclass
class SuffStats:
    """Soft counts n_k and posterior-weighted first/second moments per component."""
    counts: np.ndarray       # (M,)
    mean_x: np.ndarray       # (M, D)  E_k(x)
    mean_x2: np.ndarray      # (M, D)  E_k(x^2)


@dataclass
class AdaptedGmm:
    means: np.ndarray        # (M, D)
    variances: np.ndarray    # (M, D)
    relevance: float


def feature_dim(variant: str, M: int, D: int) -> int:
    if variant == "alpha":
        return M
    if variant in ("beta_m", "beta_s"):
        return M * D
    if variant in ("beta_sigma", "beta_s_sigma"):
        return 2 * M * D
    raise ValueError(f"unknown feature variant {variant!r}")


def _as_frames(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError("need a non-empty (T, D) MFCC matrix")
    return m


def soft_counts(g: DiagGmm, m: np.ndarray) -> np.ndarray:
    """Sum over frames of Pr(k | x_t), before any normalisation."""
    m = _as_frames(m)
    n = np.zeros(g.n_components)
    for s in range(0, m.shape[0], CHUNK):
        n += posteriors(g, m[s:s + CHUNK]).sum(axis=0)
    return n


def alpha_from_counts(n: np.ndarray, T: int) -> np.ndarray:
    p = n / T
    return p / p.sum()


def alpha_feature(g: DiagGmm, m: np.ndarray) -> FeatureVector:
    """Duration-normalised posterior mass per Gaussian, L1-normalised."""
    m = _as_frames(m)
    return FeatureVector("alpha", g.n_components, alpha_from_counts(soft_counts(g, m), m.shape[0]))


def sufficient_stats(g: DiagGmm, m: np.ndarray) -> SuffStats:
    """n_k, E_k(x) and E_k(x^2) of one clip against the background model.

    Components with n_k below 1e-10 get the background moments, so MAP
    adaptation leaves them at the prior.
    """
    m = _as_frames(m)
    M, D = g.means.shape
    n = np.zeros(M)
    s1 = np.zeros((M, D))
    s2 = np.zeros((M, D))
    for s in range(0, m.shape[0], CHUNK):
        blk = m[s:s + CHUNK]
        p = posteriors(g, blk)
        n += p.sum(axis=0)
        s1 += p.T @ blk
        s2 += p.T @ (blk ** 2)
    ex = g.means.copy()
    ex2 = g.variances + g.means ** 2
    live = n >= EMPTY_COUNT
    ex[live] = s1[live] / n[live, None]
    ex2[live] = s2[live] / n[live, None]
    return SuffStats(n, ex, ex2)


def map_adapt(g: DiagGmm, s: SuffStats, r: float = DEFAULT_RELEVANCE) -> AdaptedGmm:
    """Relevance-factor MAP update of means and variances (weights untouched)."""
    if not r > 0:
        raise ValueError("relevance factor must be positive")
    a = (s.counts / (s.counts + r))[:, None]
    mu = a * s.mean_x + (1.0 - a) * g.means
    var = a * s.mean_x2 + (1.0 - a) * (g.variances + g.means ** 2) - mu ** 2
    return AdaptedGmm(mu, np.maximum(var, g.var_floor), float(r))


def scaled_means(a: AdaptedGmm, g: DiagGmm) -> np.ndarray:
    """Adapted means times sqrt(w_k) / sigma_k of the background model."""
    return np.sqrt(g.weights)[:, None] * a.means / np.sqrt(g.variances)


def beta_feature(a: AdaptedGmm, g: DiagGmm, variant: str, sigma_as_std: bool = True) -> FeatureVector:
    """Concatenate adapted parameters component by component.

    The second block of ``beta_sigma`` / ``beta_s_sigma`` holds the adapted
    standard deviations, or the adapted variances when ``sigma_as_std`` is
    False. Only means are ever rescaled.
    """
    if a.means.shape != g.means.shape or a.variances.shape != g.means.shape:
        raise ValueError("adapted model and background model differ in (M, D)")
    if variant not in BETA_VARIANTS:
        raise ValueError(f"not a beta variant: {variant!r}")
    means = scaled_means(a, g) if variant in ("beta_s", "beta_s_sigma") else a.means
    parts = [means.ravel()]
    if variant in ("beta_sigma", "beta_s_sigma"):
        second = np.sqrt(a.variances) if sigma_as_std else a.variances
        parts.append(second.ravel())
    return FeatureVector(variant, g.n_components, np.concatenate(parts))


def clip_features(g: DiagGmm, m: np.ndarray, variants, r: float = DEFAULT_RELEVANCE,
                  sigma_as_std: bool = True) -> dict[str, np.ndarray]:
    """All requested variants of one clip from a single posterior pass."""
    m = _as_frames(m)
    s = sufficient_stats(g, m)
    out = {}
    adapted = None
    for v in variants:
        if v == "alpha":
            out[v] = alpha_from_counts(s.counts, m.shape[0])
        else:
            if adapted is None:
                adapted = map_adapt(g, s, r)
            out[v] = beta_feature(adapted, g, v, sigma_as_std).values
    return out
