import math

import numpy as np
import pytest

from aedbench.features import (AdaptedGmm, SuffStats, alpha_feature, beta_feature, clip_features,
                               feature_dim, map_adapt, soft_counts, sufficient_stats)
from aedbench.gmm import DiagGmm
from oracles import loop_posterior


def random_gmm(rng, M, D):
    return DiagGmm(rng.dirichlet(np.ones(M)), rng.normal(0, 1, (M, D)), rng.uniform(0.3, 2.0, (M, D)),
                   var_floor=np.full(D, 1e-4))


def loop_stats(g, frames):
    """n_k, E_k(x), E_k(x^2) by explicit double loops over frames and components."""
    M, D = g.means.shape
    n = [0.0] * M
    s1 = [[0.0] * D for _ in range(M)]
    s2 = [[0.0] * D for _ in range(M)]
    for x in frames:
        post = loop_posterior(g, x)
        for k in range(M):
            n[k] += post[k]
            for d in range(D):
                s1[k][d] += post[k] * x[d]
                s2[k][d] += post[k] * x[d] * x[d]
    ex = [[s1[k][d] / n[k] for d in range(D)] for k in range(M)]
    ex2 = [[s2[k][d] / n[k] for d in range(D)] for k in range(M)]
    return np.array(n), np.array(ex), np.array(ex2)


class TestAlpha:
    def test_single_frame_is_posterior(self):
        rng = np.random.default_rng(0)
        g = random_gmm(rng, 4, 3)
        x = rng.normal(0, 1, 3)
        np.testing.assert_allclose(alpha_feature(g, x[None]).values, loop_posterior(g, x), atol=1e-12)

    def test_single_component(self):
        g = DiagGmm([1.0], [[0.0]], [[1.0]])
        assert alpha_feature(g, np.random.default_rng(1).normal(0, 1, (17, 1))).values.tolist() == [1.0]

    def test_matches_double_loop(self):
        rng = np.random.default_rng(2)
        g = random_gmm(rng, 5, 3)
        X = rng.normal(0, 1.5, (40, 3))
        n, _, _ = loop_stats(g, X)
        ref = (n / len(X)) / (n / len(X)).sum()
        a = alpha_feature(g, X).values
        np.testing.assert_allclose(a, ref, atol=1e-12)
        assert abs(a.sum() - 1) <= 1e-12 and np.all(a >= 0)

    def test_duplicated_frames_invariant(self):
        rng = np.random.default_rng(3)
        g = random_gmm(rng, 6, 2)
        X = rng.normal(0, 1, (25, 2))
        np.testing.assert_allclose(alpha_feature(g, np.vstack([X, X])).values, alpha_feature(g, X).values,
                                   atol=1e-14)

    def test_empty_clip(self):
        g = DiagGmm([1.0], [[0.0]], [[1.0]])
        with pytest.raises(ValueError):
            alpha_feature(g, np.zeros((0, 1)))


class TestSufficientStats:
    def test_counts_sum_to_frames(self):
        rng = np.random.default_rng(4)
        g = random_gmm(rng, 8, 4)
        for T in (1, 7, 300):
            assert soft_counts(g, rng.normal(0, 1, (T, 4))).sum() == pytest.approx(T, abs=1e-9)

    def test_single_component_moments(self):
        X = np.random.default_rng(5).normal(2, 3, (50, 2))
        s = sufficient_stats(DiagGmm([1.0], [[0.0, 0.0]], [[1.0, 1.0]]), X)
        assert s.counts[0] == pytest.approx(50)
        np.testing.assert_allclose(s.mean_x[0], X.mean(0), atol=1e-12)
        np.testing.assert_allclose(s.mean_x2[0], (X ** 2).mean(0), atol=1e-12)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(6)
        g = random_gmm(rng, 4, 3)
        X = rng.normal(0, 1, (30, 3))
        n, ex, ex2 = loop_stats(g, X)
        s = sufficient_stats(g, X)
        np.testing.assert_allclose(s.counts, n, atol=1e-10)
        np.testing.assert_allclose(s.mean_x, ex, atol=1e-9)
        np.testing.assert_allclose(s.mean_x2, ex2, atol=1e-9)

    def test_empty_component_gets_background(self):
        g = DiagGmm([0.5, 0.5], [[0.0], [1e3]], [[1.0], [1.0]])
        s = sufficient_stats(g, np.zeros((5, 1)))
        assert s.counts[1] < 1e-10
        assert s.mean_x[1, 0] == 1e3 and s.mean_x2[1, 0] == 1.0 + 1e6

    def test_duplicated_frames_double_counts_only(self):
        rng = np.random.default_rng(7)
        g = random_gmm(rng, 3, 2)
        X = rng.normal(0, 1, (20, 2))
        a, b = sufficient_stats(g, X), sufficient_stats(g, np.vstack([X, X]))
        np.testing.assert_allclose(b.counts, 2 * a.counts, rtol=1e-12)
        np.testing.assert_allclose(b.mean_x, a.mean_x, atol=1e-12)
        np.testing.assert_allclose(b.mean_x2, a.mean_x2, atol=1e-12)


class TestMapAdapt:
    def setup_method(self):
        rng = np.random.default_rng(8)
        self.g = random_gmm(rng, 3, 2)
        self.s = SuffStats(np.array([0.0, 4.0, 100.0]), rng.normal(0, 1, (3, 2)),
                           rng.uniform(1.0, 3.0, (3, 2)))

    def test_zero_count_keeps_prior(self):
        a = map_adapt(self.g, self.s)
        np.testing.assert_array_equal(a.means[0], self.g.means[0])
        np.testing.assert_allclose(a.variances[0], self.g.variances[0], atol=1e-12)

    def test_tiny_relevance_is_ml(self):
        a = map_adapt(self.g, self.s, r=1e-9)
        live = self.s.counts > 0
        np.testing.assert_allclose(a.means[live], self.s.mean_x[live], atol=1e-9)
        ml_var = self.s.mean_x2[live] - self.s.mean_x[live] ** 2
        np.testing.assert_allclose(a.variances[live], np.maximum(ml_var, 1e-4), atol=1e-8)

    def test_huge_relevance_is_prior(self):
        a = map_adapt(self.g, self.s, r=1e12)
        np.testing.assert_allclose(a.means, self.g.means, atol=1e-8)
        np.testing.assert_allclose(a.variances, self.g.variances, atol=1e-7)

    def test_formula(self):
        r = 20.0
        a = map_adapt(self.g, self.s, r)
        for k in range(3):
            al = self.s.counts[k] / (self.s.counts[k] + r)
            for d in range(2):
                mu = al * self.s.mean_x[k, d] + (1 - al) * self.g.means[k, d]
                var = (al * self.s.mean_x2[k, d]
                       + (1 - al) * (self.g.variances[k, d] + self.g.means[k, d] ** 2) - mu * mu)
                assert a.means[k, d] == pytest.approx(mu, abs=1e-12)
                assert a.variances[k, d] == pytest.approx(max(var, 1e-4), abs=1e-12)

    def test_variance_floor(self):
        s = SuffStats(np.array([1e6, 0, 0]), self.g.means.copy(), self.g.means ** 2)
        a = map_adapt(self.g, s)
        np.testing.assert_allclose(a.variances[0], 1e-4)

    @pytest.mark.parametrize("r", [0.0, -1.0])
    def test_bad_relevance(self, r):
        with pytest.raises(ValueError):
            map_adapt(self.g, self.s, r)


class TestBeta:
    def test_dimensions(self):
        g = random_gmm(np.random.default_rng(9), 32, 20)
        X = np.random.default_rng(10).normal(0, 1, (50, 20))
        f = clip_features(g, X, ["alpha", "beta_m", "beta_s", "beta_sigma", "beta_s_sigma"])
        assert {k: v.shape[0] for k, v in f.items()} == {
            "alpha": 32, "beta_m": 640, "beta_s": 640, "beta_sigma": 1280, "beta_s_sigma": 1280}
        for k, v in f.items():
            assert v.shape[0] == feature_dim(k, 32, 20)

    def test_single_unit_component_scaled_equals_plain(self):
        g = DiagGmm([1.0], [[0.5, -1.0, 2.0]], [[1.0, 1.0, 1.0]])
        X = np.random.default_rng(11).normal(0, 1, (30, 3))
        f = clip_features(g, X, ["beta_m", "beta_s"])
        np.testing.assert_array_equal(f["beta_s"], f["beta_m"])

    def test_component_order_and_scaling(self):
        rng = np.random.default_rng(12)
        g = random_gmm(rng, 3, 2)
        a = AdaptedGmm(rng.normal(0, 1, (3, 2)), rng.uniform(0.5, 2, (3, 2)), 20.0)
        m = beta_feature(a, g, "beta_m").values
        s = beta_feature(a, g, "beta_s").values
        ms = beta_feature(a, g, "beta_sigma").values
        sv = beta_feature(a, g, "beta_sigma", sigma_as_std=False).values
        for k in range(3):
            np.testing.assert_array_equal(m[2 * k:2 * k + 2], a.means[k])
            np.testing.assert_allclose(s[2 * k:2 * k + 2],
                                       math.sqrt(g.weights[k]) * a.means[k] / np.sqrt(g.variances[k]),
                                       rtol=1e-14)
            np.testing.assert_array_equal(ms[6 + 2 * k:6 + 2 * k + 2], np.sqrt(a.variances[k]))
            np.testing.assert_array_equal(sv[6 + 2 * k:6 + 2 * k + 2], a.variances[k])
        np.testing.assert_array_equal(ms[:6], m)
        np.testing.assert_array_equal(beta_feature(a, g, "beta_s_sigma").values[:6], s)

    @pytest.mark.parametrize("T", [1, 2, 10, 500])
    def test_any_length_finite(self, T):
        g = random_gmm(np.random.default_rng(13), 4, 3)
        f = clip_features(g, np.random.default_rng(T).normal(0, 3, (T, 3)),
                          ["alpha", "beta_s_sigma"])
        assert all(np.all(np.isfinite(v)) for v in f.values())

    def test_unknown_variant(self):
        g = random_gmm(np.random.default_rng(14), 2, 2)
        a = AdaptedGmm(g.means, g.variances, 20.0)
        with pytest.raises(ValueError):
            beta_feature(a, g, "alpha")
        with pytest.raises(ValueError):
            feature_dim("gamma", 2, 2)

    def test_shape_mismatch(self):
        g = random_gmm(np.random.default_rng(15), 2, 2)
        with pytest.raises(ValueError):
            beta_feature(AdaptedGmm(np.zeros((3, 2)), np.ones((3, 2)), 20.0), g, "beta_m")
