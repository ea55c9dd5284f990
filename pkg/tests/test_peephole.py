import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import multivariate_normal

from peepscope.autoencoder import iter_forward
from peepscope.errors import ArtifactError, ConfigError, NumericError
from peepscope.peephole import (
    GmmModel,
    NormStats,
    PosteriorMatrix,
    ReducedMap,
    assign_clusters,
    build_reduced_map,
    core_vector,
    denormalize,
    estimate_posterior,
    extract,
    fit_norm,
    fit_pipeline,
    gmm_fit,
    load_pipeline,
    log_gamma,
    membership,
    membership_with_flag,
    normalize,
    peephole_vectors,
    save_pipeline,
)


def jacobi_singular_values(A, sweeps=60, tol=1e-15):
    """One-sided (Hestenes) Jacobi SVD: orthogonalize columns by plane rotations."""
    U = np.array(A, dtype=np.float64)
    if U.shape[0] < U.shape[1]:
        U = U.T.copy()
    n = U.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = U[:, i] @ U[:, i]
                beta = U[:, j] @ U[:, j]
                gamma = U[:, i] @ U[:, j]
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / math.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1 + zeta * zeta))
                c = 1 / math.sqrt(1 + t * t)
                s = c * t
                ui = U[:, i].copy()
                U[:, i] = c * ui - s * U[:, j]
                U[:, j] = s * ui + c * U[:, j]
        if off < tol:
            break
    return np.sort(np.linalg.norm(U, axis=0))[::-1]


# ----------------------------------------------------------------- reduction


def test_identity_matrix():
    m = build_reduced_map(np.eye(3), None, 3)
    np.testing.assert_allclose(m.sigma_prime, [1, 1, 1], atol=1e-14)
    assert np.linalg.norm(np.eye(3) - m.approximation()) < 1e-14


def test_diagonal_truncation():
    A = np.zeros((3, 4))
    A[0, 0], A[1, 1], A[2, 2] = 3, 2, 1
    m = build_reduced_map(A, None, 2)
    np.testing.assert_allclose(m.sigma_prime, [3, 2], atol=1e-14)
    assert np.linalg.norm(A - m.approximation()) == pytest.approx(1.0, abs=1e-12)


def test_random_8x12_against_jacobi():
    A = np.random.default_rng(0).standard_normal((8, 12))
    m = build_reduced_map(A, None, 8)
    assert np.linalg.norm(A - m.approximation()) < 1e-8
    np.testing.assert_allclose(m.sigma_prime, jacobi_singular_values(A), atol=1e-8)


def test_fifty_random_matrices_against_jacobi():
    rng = np.random.default_rng(1)
    for _ in range(50):
        r, c = rng.integers(1, 13, size=2)
        A = rng.standard_normal((r, c)) * rng.uniform(0.1, 10)
        k = min(r, c)
        m = build_reduced_map(A, None, k)
        oracle = jacobi_singular_values(A)
        np.testing.assert_allclose(m.singular_values, oracle, atol=1e-8)
        assert np.linalg.norm(A - m.approximation()) / np.linalg.norm(A) < 1e-6


@given(r=st.integers(2, 10), c=st.integers(2, 10), seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_truncation_error_and_orthonormality(r, c, seed):
    A = np.random.default_rng(seed).standard_normal((r, c))
    full = min(r, c)
    for k in range(1, full + 1):
        m = build_reduced_map(A, None, k)
        expected = math.sqrt(np.sum(m.singular_values[k:] ** 2))
        err = np.linalg.norm(A - m.approximation())
        assert abs(err - expected) <= 1e-6 * max(expected, np.linalg.norm(A) * 1e-3)
        assert np.max(np.abs(m.q_prime.T @ m.q_prime - np.eye(k))) < 1e-8
        assert np.max(np.abs(m.left.T @ m.left - np.eye(full))) < 1e-8


def test_tall_and_rank_deficient():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((10, 2)) @ rng.standard_normal((2, 6))  # rank 2, tall-ish
    m = build_reduced_map(A, None, 6)
    assert np.linalg.norm(A - m.approximation()) < 1e-8
    # Gram-based SVD resolves null directions to about sqrt(eps) * sigma_max
    assert np.all(m.singular_values[2:] < 1e-6 * m.singular_values[0])
    assert np.max(np.abs(m.q_prime.T @ m.q_prime - np.eye(6))) < 1e-8


def test_kappa_range():
    with pytest.raises(ConfigError):
        build_reduced_map(np.ones((3, 4)), None, 0)
    with pytest.raises(ConfigError):
        build_reduced_map(np.ones((3, 4)), None, 4)


def test_core_vector_selector():
    n, k = 6, 3
    q = np.eye(n + 1)[:, :k]
    m = ReducedMap(q, np.ones(k), np.eye(k), k)
    x = np.arange(1.0, n + 1)
    np.testing.assert_array_equal(core_vector(x, m), x[:k])


def test_core_vector_zero_input_is_bias_direction():
    rng = np.random.default_rng(4)
    m = build_reduced_map(rng.standard_normal((4, 9)), rng.standard_normal(4), 3)
    np.testing.assert_allclose(core_vector(np.zeros(9), m), m.q_prime[-1], atol=0)
    with pytest.raises(ConfigError):
        core_vector(np.zeros(8), m)


def test_core_vector_fidelity_full_rank():
    rng = np.random.default_rng(5)
    W, b = rng.standard_normal((20, 60)), rng.standard_normal(20)
    m = build_reduced_map(W, b, 20)
    X = rng.standard_normal((25, 60))
    y = X @ W.T + b
    recovered = (m.p_prime * m.sigma_prime) @ core_vector(X, m).T
    assert np.max(np.abs(recovered.T - y)) <= 1e-6 * np.max(np.abs(y))


# ----------------------------------------------------------------- normalization


def test_two_point_norm():
    s = fit_norm(np.array([[0.0], [2.0]]))
    assert s.mean[0] == 1.0 and s.std[0] == 1.0
    np.testing.assert_array_equal(normalize(np.array([[0.0], [2.0]]), s).ravel(), [-1, 1])


def test_degenerate_coordinate():
    vs = np.column_stack([np.arange(5.0), np.full(5, 3.0)])
    s = fit_norm(vs)
    assert list(s.degenerate) == [False, True]
    np.testing.assert_array_equal(normalize(vs, s)[:, 1], 0.0)
    with pytest.raises(ConfigError):
        fit_norm(np.ones((1, 3)))


@given(arrays(np.float64, (12, 4), elements=st.floats(-1e4, 1e4, allow_nan=False)))
@settings(max_examples=50, deadline=None)
def test_norm_properties(vs):
    s = fit_norm(vs)
    v = normalize(vs, s)
    live = ~s.degenerate
    assert np.all(np.abs(v.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(v[:, live].var(axis=0) - 1) < 1e-6)
    np.testing.assert_allclose(denormalize(v, s), vs, atol=1e-12 * max(1.0, np.abs(vs).max()))


# ----------------------------------------------------------------- GMM


def test_single_component_closed_form():
    X = np.random.default_rng(6).standard_normal((300, 3)) @ np.array([[1, 0, 0], [0.5, 2, 0], [0, 0.3, 0.5]])
    g = gmm_fit(X, 1, seed=0)
    assert g.weights[0] == pytest.approx(1.0)
    np.testing.assert_allclose(g.means[0], X.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(g.covariances[0], np.cov(X.T, ddof=0) + 1e-6 * np.eye(3), atol=1e-10)


def test_two_blobs_recovered():
    rng = np.random.default_rng(7)
    X = np.vstack([rng.standard_normal((500, 2)) + 5, rng.standard_normal((500, 2)) - 5])
    g = gmm_fit(X, 2, seed=1)
    order = np.argsort(g.means[:, 0])
    np.testing.assert_allclose(g.means[order], [[-5, -5], [5, 5]], atol=0.2)
    np.testing.assert_allclose(g.weights, [0.5, 0.5], atol=0.05)


def test_em_log_likelihood_monotone():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        centers = rng.uniform(-4, 4, size=(4, 3))
        X = np.vstack([c + rng.standard_normal((80, 3)) for c in centers])
        g = gmm_fit(X, 4, seed=seed, restarts=1)
        ll = np.asarray(g.log_likelihood)
        assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[:-1])), seed
        assert g.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_gmm_errors():
    with pytest.raises(ConfigError):
        gmm_fit(np.zeros((3, 2)), 4)
    # duplicated points give singular covariances that regularization cannot always rescue
    X = np.zeros((20, 2))
    g = gmm_fit(X, 1)
    assert np.all(np.isfinite(g.covariances))


def test_gmm_is_deterministic():
    X = np.random.default_rng(8).standard_normal((200, 3))
    a, b = gmm_fit(X, 3, seed=4), gmm_fit(X, 3, seed=4)
    assert a.means.tobytes() == b.means.tobytes()
    assert a.log_likelihood == b.log_likelihood


def test_log_gamma_matches_scipy():
    rng = np.random.default_rng(9)
    C, k = 3, 4
    means = rng.standard_normal((C, k))
    covs = np.stack([(lambda m: m @ m.T + np.eye(k))(rng.standard_normal((k, k))) for _ in range(C)])
    weights = np.array([0.2, 0.3, 0.5])
    g = GmmModel(weights, means, covs)
    v = rng.standard_normal((7, k))
    oracle = np.column_stack([np.log(weights[i]) + multivariate_normal(means[i], covs[i]).logpdf(v)
                              for i in range(C)])
    np.testing.assert_allclose(log_gamma(v, g), oracle, rtol=1e-10)


def _hand_gmm():
    return GmmModel(np.array([0.5, 0.5]), np.array([[0.0], [2.0]]), np.array([[[1.0]], [[1.0]]]))


def test_membership_examples():
    one = GmmModel(np.array([1.0]), np.zeros((1, 2)), np.eye(2)[None])
    np.testing.assert_array_equal(membership(np.array([3.0, -1.0]), one), [1.0])
    sym = GmmModel(np.array([0.5, 0.5]), np.array([[1.0, 0], [-1.0, 0]]), np.stack([np.eye(2)] * 2))
    np.testing.assert_allclose(membership(np.zeros(2), sym), [0.5, 0.5], atol=1e-15)
    d = membership(np.zeros(1), _hand_gmm())
    np.testing.assert_allclose(d, [1 / (1 + math.exp(-2)), math.exp(-2) / (1 + math.exp(-2))], atol=1e-12)
    assert d[0] == pytest.approx(0.8808, abs=1e-4)


def test_membership_far_out_of_distribution():
    d, ood = membership_with_flag(np.array([[1e200]]), _hand_gmm())
    assert np.all(np.isfinite(d)) and d.sum() == pytest.approx(1.0)
    assert ood[0]
    d = membership(np.array([1e6]), _hand_gmm())
    np.testing.assert_allclose(d, [0, 1], atol=1e-12)


def test_argmax_ties_to_lowest_index():
    assert assign_clusters(np.array([0.5, 0.5])) == 0
    assert list(assign_clusters(np.array([[0.2, 0.4, 0.4], [0.1, 0.1, 0.8]]))) == [1, 2]


# ----------------------------------------------------------------- posterior & extraction


def test_posterior_examples():
    U = estimate_posterior([0, 0, 1, 1], [0, 0, 1, 1], 2, 2).U
    np.testing.assert_array_equal(U, np.eye(2))
    U = estimate_posterior([0, 1, 1, 0], [0, 0, 0, 1], 2, 2).U
    np.testing.assert_allclose(U[:, 0], [1 / 3, 2 / 3])
    np.testing.assert_allclose(U[:, 1], [1, 0])
    post = estimate_posterior([0, 1, 0], [0, 1, 2], 2, 4)
    np.testing.assert_array_equal(post.U[:, 3], [0.5, 0.5])
    assert list(post.empty_columns) == [False, False, False, True]
    with pytest.raises(ConfigError):
        estimate_posterior([], [], 2, 2)
    with pytest.raises(ConfigError):
        estimate_posterior([2], [0], 2, 2)


@given(labels=st.lists(st.integers(0, 4), min_size=1, max_size=60), data=st.data())
@settings(max_examples=60, deadline=None)
def test_posterior_columns_stochastic(labels, data):
    clusters = data.draw(st.lists(st.integers(0, 6), min_size=len(labels), max_size=len(labels)))
    post = estimate_posterior(labels, clusters, 5, 7)
    np.testing.assert_allclose(post.U.sum(axis=0), 1.0, atol=1e-9)
    assert np.all((post.U >= 0) & (post.U <= 1))
    assert post.counts.sum() == len(labels)


def _pipeline_parts(pid="x", k=3, C=4, T=5, seed=0):
    rng = np.random.default_rng(seed)
    rmap = build_reduced_map(rng.standard_normal((6, 10)), rng.standard_normal(6), k)
    rmap = ReducedMap(rmap.q_prime, rmap.singular_values, rmap.left, k, pid)
    X = rng.standard_normal((400, 10))
    v = core_vector(X, rmap)
    stats = fit_norm(v)
    stats = NormStats(stats.mean, stats.std, stats.degenerate, pid)
    gmm = gmm_fit(normalize(v, stats), C, seed=seed)
    gmm.pipeline_id = pid
    clusters = assign_clusters(membership(normalize(v, stats), gmm))
    post = estimate_posterior(rng.integers(0, T, len(v)), clusters, T, C)
    post = PosteriorMatrix(post.U, post.counts, post.vocabulary, post.empty_columns, pid)
    return rmap, stats, gmm, post


def test_extract_rejects_mixed_pipelines():
    a = _pipeline_parts("a")
    b = _pipeline_parts("b")
    x = np.zeros(10)
    extract(x, *a)
    with pytest.raises(ConfigError, match="different pipeline"):
        extract(x, a[0], a[1], a[2], b[3])


def test_identity_posterior_gives_p_equal_d():
    rmap, stats, gmm, _ = _pipeline_parts("i", T=4, C=4)
    eye = PosteriorMatrix(np.eye(4), np.eye(4, dtype=np.int64), tuple("abcd"), np.zeros(4, bool), "i")
    d, p, _ = peephole_vectors(np.random.default_rng(1).standard_normal((5, 10)), rmap, stats, gmm, eye)
    np.testing.assert_allclose(p, d, atol=0)


def test_one_hot_membership_selects_column():
    rng = np.random.default_rng(2)
    U = rng.dirichlet(np.ones(5), size=4).T
    d = np.zeros(4)
    d[2] = 1
    np.testing.assert_allclose(U @ d, U[:, 2])


def test_simplex_invariants_ten_thousand_inputs():
    parts = _pipeline_parts("s", k=3, C=4, T=5, seed=3)
    rng = np.random.default_rng(4)
    inliers = rng.standard_normal((9000, 10))
    outliers = rng.standard_normal((1000, 10)) * 10.0 ** rng.uniform(3, 150, size=(1000, 1))
    d, p, _ = peephole_vectors(np.vstack([inliers, outliers]), *parts)
    assert np.all(d >= 0) and np.all(p >= 0)
    assert np.max(np.abs(d.sum(axis=1) - 1)) <= 1e-9
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-9


def test_argmax_invariant_to_common_gamma_rescaling():
    rmap, stats, gmm, post = _pipeline_parts("r")
    v = normalize(core_vector(np.random.default_rng(5).standard_normal((50, 10)), rmap), stats)
    lg = log_gamma(v, gmm)
    for shift in (-700.0, 0.0, 300.0):
        z = lg + shift
        d = np.exp(z - z.max(axis=1, keepdims=True))
        d /= d.sum(axis=1, keepdims=True)
        np.testing.assert_array_equal(np.argmax(d @ post.U.T, axis=1),
                                      np.argmax(membership(v, gmm) @ post.U.T, axis=1))


def test_singular_covariance_reports_component():
    for bad in (np.full((2, 2), np.nan), -1e3 * np.eye(2)):
        g = GmmModel(np.array([0.5, 0.5]), np.zeros((2, 2)), np.stack([np.eye(2), bad]))
        with pytest.raises(NumericError, match="component 1"):
            log_gamma(np.zeros(2), g)


# ----------------------------------------------------------------- pipeline


def test_pipeline_fit_is_deterministic(small_system):
    again = fit_pipeline(small_system["model"], small_system["corrupted"], kappa=8, C=6, tag_set="kinds",
                         seed=0, restarts=1)
    ref = small_system["pipeline"]
    assert again.pipeline_id == ref.pipeline_id
    assert again.gmm.means.tobytes() == ref.gmm.means.tobytes()
    np.testing.assert_array_equal(again.posterior.U, ref.posterior.U)


def test_pipeline_shapes_and_vectors(small_system):
    pl = small_system["pipeline"]
    assert pl.posterior.U.shape == (5, 6)
    assert pl.vocabulary == ("GWN", "Offset", "Impulse", "PSA", "Step")
    h = next(iter(iter_forward(small_system["model"], small_system["corrupted"].subset(slice(0, 20)))))[3]
    d, p, _ = pl.vectors(h)
    assert d.shape == (20, 6) and p.shape == (20, 5)
    np.testing.assert_allclose(p, d @ pl.posterior.U.T, atol=1e-12)


def test_pipeline_save_load(small_system, tmp_path):
    pl = small_system["pipeline"]
    digest = save_pipeline(pl, tmp_path / "p.pphl")
    back = load_pipeline(tmp_path / "p.pphl")
    assert back.pipeline_id == pl.pipeline_id and back.tag_set == pl.tag_set
    h = np.random.default_rng(0).standard_normal((4, pl.reduced_map.q_prime.shape[0] - 1))
    for a, b in zip(pl.vectors(h), back.vectors(h)):
        np.testing.assert_array_equal(a, b)
    assert save_pipeline(back, tmp_path / "q.pphl") == digest
    raw = (tmp_path / "p.pphl").read_bytes()
    (tmp_path / "bad.pphl").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ArtifactError, match="magic"):
        load_pipeline(tmp_path / "bad.pphl")
    (tmp_path / "short.pphl").write_bytes(raw[:6])
    with pytest.raises(ArtifactError):
        load_pipeline(tmp_path / "short.pphl")
