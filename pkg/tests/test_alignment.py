import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivector_nda import io
from ivector_nda.alignment import (
    DiagonalGmm,
    gmm_from_posteriors,
    gmm_posteriors,
    load_external_posteriors,
    train_gmm_em,
)


def _normal_pdf(x, mu, var):
    return np.exp(-0.5 * (x - mu) ** 2 / var) / np.sqrt(2 * np.pi * var)


class TestPosteriors:
    def test_single_component_is_one(self):
        gmm = DiagonalGmm(np.ones(1), np.zeros((1, 3)), np.ones((1, 3)))
        post = gmm_posteriors(gmm, np.random.default_rng(0).standard_normal((5, 3)))
        assert np.all(post == 1.0)

    def test_symmetric_pair_at_origin(self):
        gmm = DiagonalGmm(np.array([0.5, 0.5]), np.array([[-1.0, 2.0], [1.0, -2.0]]), np.ones((2, 2)))
        np.testing.assert_allclose(gmm_posteriors(gmm, np.zeros((1, 2))), [[0.5, 0.5]], atol=1e-15)

    def test_matches_density_ratio(self):
        w, mu, var = np.array([0.3, 0.7]), np.array([[-0.5], [1.2]]), np.array([[0.8], [2.5]])
        gmm = DiagonalGmm(w, mu, var)
        x = np.array([-1.0, 0.0, 0.4, 3.0])
        dens = np.stack([w[g] * _normal_pdf(x, mu[g, 0], var[g, 0]) for g in range(2)], axis=1)
        expected = dens / dens.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(gmm_posteriors(gmm, x[:, None]), expected, atol=1e-12, rtol=0)

    def test_far_frames_stay_finite(self):
        gmm = DiagonalGmm(np.array([0.5, 0.5]), np.array([[0.0], [1.0]]), np.full((2, 1), 1e-3))
        post = gmm_posteriors(gmm, np.array([[1e4]]))
        np.testing.assert_allclose(post, [[0.0, 1.0]])

    def test_dimension_mismatch(self):
        gmm = DiagonalGmm(np.ones(1), np.zeros((1, 3)), np.ones((1, 3)))
        with pytest.raises(ValueError, match="dimension"):
            gmm_posteriors(gmm, np.zeros((4, 2)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 4))
    def test_rows_stochastic_and_permutation_covariant(self, seed, G, d):
        rng = np.random.default_rng(seed)
        w = rng.dirichlet(np.ones(G))
        gmm = DiagonalGmm(w / w.sum(), rng.standard_normal((G, d)) * 3, rng.uniform(0.1, 3, (G, d)))
        X = rng.standard_normal((20, d)) * 4
        post = gmm_posteriors(gmm, X)
        assert np.all(np.abs(post.sum(axis=1) - 1) < 1e-6)
        assert np.all((post >= 0) & (post <= 1))
        perm = rng.permutation(G)
        pg = DiagonalGmm(gmm.weights[perm], gmm.means[perm], gmm.variances[perm])
        np.testing.assert_allclose(gmm_posteriors(pg, X), post[:, perm], rtol=1e-12, atol=1e-14)


class TestTraining:
    def test_single_component_is_global_moments(self):
        X = np.random.default_rng(0).standard_normal((200, 3)) * [1.0, 2.0, 0.5] + [1, -2, 3]
        gmm = train_gmm_em([X[:120], X[120:]], 1, iters=3)
        np.testing.assert_allclose(gmm.means[0], X.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(gmm.variances[0], X.var(axis=0), rtol=1e-10)
        assert gmm.weights[0] == 1.0

    def test_two_clusters_recovered(self):
        rng = np.random.default_rng(0)
        n_neg, n_pos = 7000, 3000  # standard error of each mean < 0.02
        X = np.concatenate([rng.normal(-10, 1, n_neg), rng.normal(10, 1, n_pos)])[:, None]
        gmm = train_gmm_em([X], 2, iters=10)
        order = np.argsort(gmm.means[:, 0])
        # oracle: per-cluster sample moments of the generated data
        np.testing.assert_allclose(gmm.means[order, 0], [X[:n_neg].mean(), X[n_neg:].mean()], atol=1e-6)
        assert np.all(np.abs(gmm.means[order, 0] - [-10, 10]) < 0.1)
        assert np.all(np.abs(gmm.weights[order] - [0.7, 0.3]) < 0.02)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 1000), st.sampled_from([1, 2, 4, 8]))
    def test_loglik_monotone_and_simplex(self, seed, G):
        rng = np.random.default_rng(seed)
        X = np.concatenate([rng.standard_normal((100, 2)) + rng.uniform(-4, 4, 2) for _ in range(3)])
        hist = []
        gmm = train_gmm_em([X[:150], X[150:]], G, iters=8, history=hist)
        assert len(hist) == 9
        for a, b in zip(hist, hist[1:]):
            assert b >= a - 1e-8 * abs(a)
        assert abs(gmm.weights.sum() - 1) < 1e-10

    def test_deterministic_and_worker_independent(self):
        X = np.random.default_rng(3).standard_normal((600, 4))
        parts = [X[:100], X[100:350], X[350:]]
        a = train_gmm_em(parts, 4, iters=4, seed=5)
        b = train_gmm_em(parts, 4, iters=4, seed=5, n_jobs=3)
        assert a.means.tobytes() == b.means.tobytes()
        assert a.variances.tobytes() == b.variances.tobytes()

    def test_subsample_seeded(self):
        X = np.random.default_rng(3).standard_normal((600, 2))
        a = train_gmm_em([X], 2, iters=2, seed=1, subsample=0.5)
        b = train_gmm_em([X], 2, iters=2, seed=1, subsample=0.5)
        c = train_gmm_em([X], 2, iters=2, seed=2, subsample=0.5)
        assert a.means.tobytes() == b.means.tobytes() != c.means.tobytes()

    def test_variance_floor(self):
        X = np.zeros((100, 2))
        X[:, 1] = np.random.default_rng(0).standard_normal(100)
        X[50:, 0] = 1.0
        gmm = train_gmm_em([X], 2, iters=5)
        floor = 1e-4 * X.var(axis=0)
        assert np.all(gmm.variances >= floor * (1 - 1e-12))

    def test_errors(self):
        X = np.zeros((30, 2))
        with pytest.raises(ValueError, match="power of two"):
            train_gmm_em([X], 3)
        with pytest.raises(ValueError, match="insufficient frames"):
            train_gmm_em([X], 4)


def test_gmm_from_posteriors_matches_hard_moments():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 3))
    labels = np.arange(40) % 2
    post = np.eye(2)[labels]
    gmm = gmm_from_posteriors([X], [post])
    for g in range(2):
        np.testing.assert_allclose(gmm.means[g], X[labels == g].mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(gmm.variances[g], X[labels == g].var(axis=0), atol=1e-12)
    np.testing.assert_allclose(gmm.weights, [0.5, 0.5])


class TestExternalPosteriors:
    def test_one_hot_unchanged(self, tmp_path):
        P = np.eye(4)[[0, 2, 1, 3, 3]]
        io.write_fmat(tmp_path / "p.fmat", P)
        assert np.array_equal(load_external_posteriors(tmp_path / "p.fmat"), P)

    def test_small_deviation_renormalized(self, tmp_path):
        P = np.array([[0.4995, 0.5], [0.25, 0.75]])
        io.write_fmat(tmp_path / "p.fmat", P)
        out = load_external_posteriors(tmp_path / "p.fmat")
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-15)

    def test_large_deviation_rejected(self, tmp_path):
        io.write_fmat(tmp_path / "p.fmat", np.array([[0.5, 0.4]]))
        with pytest.raises(ValueError, match="not a posterior matrix"):
            load_external_posteriors(tmp_path / "p.fmat")

    def test_negative_rejected(self, tmp_path):
        io.write_fmat(tmp_path / "p.fmat", np.array([[1.1, -0.1]]))
        with pytest.raises(ValueError, match="not a posterior matrix"):
            load_external_posteriors(tmp_path / "p.fmat")


def test_gmm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    w = rng.dirichlet(np.ones(3))
    gmm = DiagonalGmm(w / w.sum(), rng.standard_normal((3, 2)), rng.uniform(0.5, 2, (3, 2)))
    gmm.save(tmp_path / "ubm.json")
    back = DiagonalGmm.load(tmp_path / "ubm.json")
    assert back.means.tobytes() == gmm.means.tobytes()
    assert back.variances.tobytes() == gmm.variances.tobytes()
    assert back.weights.tobytes() == gmm.weights.tobytes()


def test_gmm_rejects_bad_weights():
    with pytest.raises(ValueError):
        DiagonalGmm(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1)))
