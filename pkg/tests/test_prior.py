import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from learnedprior.model import MlpModel
from learnedprior.prior import (CompositePrior, IsotropicGaussian, LowRankGaussian,
                                composite_log_density_and_grad, grad_log_density, log_density,
                                rescale, sample)


def random_prior(rng, d, rank, scale=1.0):
    return LowRankGaussian(rng.standard_normal(d), rng.uniform(0.1, 2.0, d),
                           rng.standard_normal((d, rank)), scale)


def dense_logpdf(mean, cov, w):
    c = np.linalg.cholesky(cov)
    z = np.linalg.solve(c, w - mean)
    return -0.5 * (len(w) * np.log(2 * np.pi) + 2 * np.log(np.diag(c)).sum() + z @ z)


def dense_cov(p):
    # built independently of the Woodbury factors
    L = p.rank
    low = p.deviations @ p.deviations.T / max(L - 1, 1) if L else 0.0
    return p.scale * (0.5 * np.diag(p.diag_var) + 0.5 * low)


def unit_prior():
    return LowRankGaussian(np.zeros(2), np.array([2.0, 2.0]), np.zeros((2, 0)))


def test_standard_normal_values():
    p = unit_prior()
    assert log_density(p, np.zeros(2)) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    assert log_density(p, np.array([1.0, 0.0])) == pytest.approx(-np.log(2 * np.pi) - 0.5, abs=1e-12)
    assert log_density(p, np.zeros(2)) == pytest.approx(-1.837877, abs=1e-6)


def test_rescale_closed_form():
    p = rescale(unit_prior(), 4.0)
    assert log_density(p, np.array([2.0, 0.0])) == pytest.approx(-np.log(8 * np.pi) - 0.5, abs=1e-12)
    assert log_density(p, np.array([2.0, 0.0])) == pytest.approx(-3.72417, abs=1e-5)


def test_rescale_identity_and_errors():
    rng = np.random.default_rng(0)
    p = random_prior(rng, 5, 2)
    q = rescale(p, 1.0)
    w = rng.standard_normal(5)
    assert log_density(q, w) == log_density(p, w)
    with pytest.raises(ValueError):
        rescale(p, 0.0)
    with pytest.raises(ValueError):
        rescale(p, -1.0)


@pytest.mark.parametrize("lam", [0.5, 2.0, 30.0])
def test_rescale_relation(lam):
    rng = np.random.default_rng(int(lam * 10))
    p = random_prior(rng, 6, 3)
    w = rng.standard_normal(6)
    r = w - p.mean
    quad = r @ np.linalg.solve(dense_cov(p), r)
    expected = log_density(p, w) - 0.5 * 6 * np.log(lam) + 0.5 * quad * (1 - 1 / lam)
    assert log_density(rescale(p, lam), w) == pytest.approx(expected, rel=1e-10)
    assert log_density(rescale(p, lam), w) == pytest.approx(
        dense_logpdf(p.mean, dense_cov(rescale(p, lam)), w), rel=1e-10)


def test_gradient_simple_cases():
    p = unit_prior()
    assert np.array_equal(grad_log_density(p, p.mean), np.zeros(2))
    np.testing.assert_allclose(grad_log_density(p, np.array([1.0, -2.0])), [-1.0, 2.0])


@given(st.integers(1, 50), st.integers(0, 10), st.sampled_from([0.5, 1.0, 10.0]), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_woodbury_matches_dense(d, rank, lam, seed):
    rng = np.random.default_rng(seed)
    p = random_prior(rng, d, rank, lam)
    w = p.mean + rng.standard_normal(d)
    cov = dense_cov(p)
    ref = dense_logpdf(p.mean, cov, w)
    assert abs(p.log_density(w) - ref) <= 1e-8 * abs(ref)
    gref = -np.linalg.solve(cov, w - p.mean)
    assert np.linalg.norm(p.grad_log_density(w) - gref) <= 1e-8 * max(np.linalg.norm(gref), 1e-300)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    p = random_prior(rng, 8, 3, 2.0)
    w = p.mean + rng.standard_normal(8)
    h = 1e-5
    num = np.array([(p.log_density(w + h * e) - p.log_density(w - h * e)) / (2 * h) for e in np.eye(8)])
    g = p.grad_log_density(w)
    assert np.linalg.norm(g - num) / np.linalg.norm(g) < 1e-6


def test_rank_zero_equals_plain_diagonal():
    rng = np.random.default_rng(5)
    d = 7
    var = rng.uniform(0.2, 3.0, d)
    p = LowRankGaussian(rng.standard_normal(d), var, np.zeros((d, 0)), 1.7)
    w = rng.standard_normal(d)
    s2 = 0.5 * 1.7 * var
    direct = -0.5 * np.sum(np.log(2 * np.pi * s2) + (w - p.mean) ** 2 / s2)
    assert p.log_density(w) == pytest.approx(direct, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("lam", [0.3, 1.0, 7.0])
def test_mode_is_mean_for_every_scale(lam):
    rng = np.random.default_rng(6)
    p = rescale(random_prior(rng, 5, 2), lam)
    assert np.allclose(p.grad_log_density(p.mean), 0.0)
    for _ in range(20):
        assert p.log_density(p.mean + 0.1 * rng.standard_normal(5)) < p.log_density(p.mean)


def test_normalizes_to_one_in_two_dims():
    p = LowRankGaussian(np.array([0.2, -0.1]), np.array([0.5, 0.8]), np.array([[0.6, -0.2], [0.3, 0.4]]), 1.3)
    f = lambda y, x: np.exp(p.log_density(np.array([x, y])))
    total, _ = integrate.dblquad(f, -8, 8, -8, 8, epsabs=1e-7)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_sampling_covariance():
    rng = np.random.default_rng(7)
    p = random_prior(rng, 4, 2, 1.5)
    draws = np.array([p.sample(rng) for _ in range(100_000)])
    cov = dense_cov(p)
    emp = np.cov(draws.T)
    # entrywise within 5% of the diagonal scale
    assert np.all(np.abs(emp - cov) <= 0.05 * np.sqrt(np.outer(np.diag(cov), np.diag(cov))))


def test_sampling_deterministic_and_collapsed():
    p = LowRankGaussian(np.array([1.0, 2.0]), np.full(2, 1e-8), np.zeros((2, 2)))
    a = sample(p, np.random.default_rng(3))
    b = sample(p, np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert np.all(np.abs(a - p.mean) < 10 * np.sqrt(1e-8))


def test_dimension_and_finiteness_errors():
    p = unit_prior()
    with pytest.raises(ValueError):
        p.log_density(np.zeros(3))
    with pytest.raises(ValueError):
        p.log_density(np.array([np.nan, 0.0]))


def test_truncate_keeps_largest_columns():
    d = np.array([[1.0, 0.0, 3.0], [0.0, 2.0, 0.0]])
    p = LowRankGaussian(np.zeros(2), np.ones(2), d)
    t = p.truncate(2)
    np.testing.assert_array_equal(t.deviations, d[:, [1, 2]])
    assert p.truncate(0).rank == 0
    assert np.array_equal(p.truncate(3).deviations, p.deviations)
    with pytest.raises(ValueError):
        p.truncate(4)


# --- composite ----------------------------------------------------------------

def test_composite_additivity_and_mode():
    m = MlpModel([2, 3, 2])
    iso = IsotropicGaussian(1.0)
    c = CompositePrior(m.layout, None, [("feature_extractor", iso), ("head", iso)])
    lp, g = composite_log_density_and_grad(c, np.zeros(m.dim))
    assert lp == pytest.approx(-0.5 * m.dim * np.log(2 * np.pi), abs=1e-12)
    assert np.array_equal(g, np.zeros(m.dim))

    rng = np.random.default_rng(0)
    fe_dim = m.layout.group_dim("feature_extractor")
    learned = random_prior(rng, fe_dim, 2)
    c2 = CompositePrior(m.layout, (learned, "feature_extractor"), [("head", IsotropicGaussian(0.5))])
    w = np.zeros(m.dim)
    w[m.layout.group_indices("feature_extractor")] = learned.mean
    assert np.allclose(c2.log_density_and_grad(w)[1], 0.0)


def test_composite_matches_block_dense_oracle():
    rng = np.random.default_rng(1)
    m = MlpModel([3, 4, 2])
    fe = m.layout.group_indices("feature_extractor")
    head = m.layout.group_indices("head")
    learned = random_prior(rng, len(fe), 3, 2.0)
    c = CompositePrior(m.layout, (learned, "feature_extractor"), [("head", IsotropicGaussian(0.3))])
    cov = np.zeros((m.dim, m.dim))
    cov[np.ix_(fe, fe)] = dense_cov(learned)
    cov[np.ix_(head, head)] = 0.3 * np.eye(len(head))
    mean = np.zeros(m.dim)
    mean[fe] = learned.mean
    for _ in range(5):
        w = rng.standard_normal(m.dim)
        lp, g = c.log_density_and_grad(w)
        ref = dense_logpdf(mean, cov, w)
        assert abs(lp - ref) <= 1e-8 * abs(ref)
        np.testing.assert_allclose(g, -np.linalg.solve(cov, w - mean), rtol=1e-8, atol=1e-10)


def test_composite_requires_full_coverage():
    m = MlpModel([2, 3, 2])
    with pytest.raises(ValueError, match="uncovered"):
        CompositePrior(m.layout, None, [("head", IsotropicGaussian(1.0))])
    with pytest.raises(ValueError):
        CompositePrior(m.layout, (LowRankGaussian.isotropic(np.zeros(3), 1.0), "feature_extractor"),
                       [("head", IsotropicGaussian(1.0))])
