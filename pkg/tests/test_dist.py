import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from lhalf.dist import (
    NotPositiveDefiniteError,
    ParameterDomainError,
    RngStream,
    digamma,
    sample_gamma,
    sample_inverse_gamma,
    sample_inverse_gaussian,
    spd_factor,
    spd_solve,
    tri_solve_lower,
    tri_solve_upper_t,
    trigamma,
)

from conftest import within_se

N_BIG = 10**6
N_KS = 10**5
positive = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False)


# ---------------------------------------------------------------- streams


def test_stream_reproducible():
    a = RngStream(7, (1, 2)).generator().random(20)
    b = RngStream(7, (1, 2)).generator().random(20)
    assert np.array_equal(a, b)


def test_distinct_streams_differ_and_look_independent():
    a = RngStream(7, 1).generator().standard_normal(N_KS)
    b = RngStream(7, 2).generator().standard_normal(N_KS)
    assert not np.array_equal(a, b)
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 4 / math.sqrt(N_KS)


def test_child_matches_flat_key():
    s = RngStream(3, (4,)).child(5, 6)
    assert s.key == (4, 5, 6)
    assert np.array_equal(s.generator().random(5), RngStream(3, (4, 5, 6)).generator().random(5))


@pytest.mark.parametrize("seed", [-1, 2**64])
def test_stream_rejects_out_of_range_seed(seed):
    with pytest.raises(ParameterDomainError):
        RngStream(seed)


# ---------------------------------------------------------------- gamma family


def test_gamma_mean_unit_shape():
    x = sample_gamma(1.0, 2.0, RngStream(1), size=N_BIG)
    assert within_se(x, 0.5)


def test_gamma_moments_v_prior():
    x = sample_gamma(1.5, 0.25, RngStream(2), size=N_BIG)
    assert within_se(x, 6.0)
    # SE of the sample variance from the fourth central moment
    var = x.var(ddof=1)
    mu4 = np.mean((x - x.mean()) ** 4)
    se_var = math.sqrt((mu4 - var**2) / x.size)
    assert abs(var - 24.0) <= 3 * se_var


def test_gamma_ks_against_shape_augmentation():
    # textbook construction: Gamma(a) = Gamma(a + 1) * U**(1/a)
    gen = np.random.default_rng(5)
    shape, rate = 0.7, 3.0
    ref = gen.gamma(shape + 1.0, 1.0, N_KS) * gen.random(N_KS) ** (1.0 / shape) / rate
    x = sample_gamma(shape, rate, RngStream(5), size=N_KS)
    assert stats.ks_2samp(x, ref).pvalue > 0.01


@given(positive, positive)
def test_gamma_positive(shape, rate):
    assert np.all(sample_gamma(shape, rate, RngStream(0), size=50) > 0)


def test_inverse_gamma_mean():
    x = sample_inverse_gamma(3.0, 2.0, RngStream(3), size=N_BIG)
    assert within_se(x, 1.0)


def test_inverse_gamma_reciprocal_is_gamma():
    x = sample_inverse_gamma(2.5, 1.5, RngStream(4), size=N_KS)
    ref = np.random.default_rng(9).gamma(2.5, 1.0 / 1.5, N_KS)
    assert stats.ks_2samp(1.0 / x, ref).pvalue > 0.01


@given(positive, positive)
def test_inverse_gamma_positive(shape, rate):
    assert np.all(sample_inverse_gamma(shape, rate, RngStream(0), size=50) > 0)


@pytest.mark.parametrize("bad", [0.0, -1.0, np.inf, np.nan])
def test_gamma_domain(bad):
    with pytest.raises(ParameterDomainError):
        sample_gamma(bad, 1.0, RngStream(0))
    with pytest.raises(ParameterDomainError):
        sample_inverse_gamma(1.0, bad, RngStream(0))


# ---------------------------------------------------------------- inverse Gaussian


def test_inverse_gaussian_mean():
    x = sample_inverse_gaussian(1.0, 0.5, RngStream(6), size=N_BIG)
    assert within_se(x, 1.0)


def test_inverse_gaussian_variance():
    x = sample_inverse_gaussian(2.0, 8.0, RngStream(7), size=N_BIG)
    var = x.var(ddof=1)
    mu4 = np.mean((x - x.mean()) ** 4)
    se_var = math.sqrt((mu4 - var**2) / x.size)
    assert abs(var - 1.0) <= 3 * se_var


@pytest.mark.parametrize("mean,shape", [(1.0, 0.5), (0.3, 4.0), (50.0, 0.5)])
def test_inverse_gaussian_ks_analytic_cdf(mean, shape):
    x = sample_inverse_gaussian(mean, shape, RngStream(8), size=N_KS)
    # scipy's invgauss(mu=m/s, scale=s) is IG(mean=m, shape=s)
    ref = stats.invgauss(mean / shape, scale=shape)
    assert stats.kstest(x, ref.cdf).pvalue > 0.01


def test_inverse_gaussian_extreme_mean_stays_finite():
    # tiny loadings produce huge means; the small root must not cancel to 0
    x = sample_inverse_gaussian(1e15, 0.5, RngStream(9), size=1000)
    assert np.all(np.isfinite(x)) and np.all(x > 0)


@given(positive, positive)
def test_inverse_gaussian_positive(mean, shape):
    assert np.all(sample_inverse_gaussian(mean, shape, RngStream(0), size=50) > 0)


# ---------------------------------------------------------------- special functions


def test_trigamma_one():
    assert trigamma(1.0) == pytest.approx(math.pi**2 / 6, abs=1e-12)


def test_digamma_recurrence():
    assert digamma(2.0) - digamma(1.0) == pytest.approx(1.0, abs=1e-12)


def _digamma_series(x, terms=200000):
    # psi(x) = -gamma + sum_{k>=0} (1/(k+1) - 1/(k+x)), tail closed by Euler-Maclaurin
    k = np.arange(terms, dtype=float)
    s = np.sum(1.0 / (k + 1.0) - 1.0 / (k + x))
    tail = math.log((terms + x) / (terms + 1.0))
    return -0.57721566490153286 + s + tail


def test_digamma_one_series_oracle():
    assert digamma(1.0) == pytest.approx(-0.5772156649, abs=1e-10)
    assert digamma(1.0) == pytest.approx(_digamma_series(1.0), abs=1e-8)


@given(st.floats(min_value=0.05, max_value=500.0))
def test_digamma_trigamma_recurrences(x):
    assert digamma(x + 1.0) - digamma(x) == pytest.approx(1.0 / x, rel=1e-10, abs=1e-10)
    assert trigamma(x) - trigamma(x + 1.0) == pytest.approx(1.0 / x**2, rel=1e-9)


def test_trigamma_is_derivative_of_digamma():
    x = np.array([0.3, 1.7, 5.9, 6.1, 40.0])
    h = 1e-5
    fd = (digamma(x + h) - digamma(x - h)) / (2 * h)
    assert np.allclose(trigamma(x), fd, rtol=1e-7)


def test_special_functions_domain():
    with pytest.raises(ParameterDomainError):
        digamma(0.0)
    with pytest.raises(ParameterDomainError):
        trigamma(-1.0)


def test_trigamma_integral_oracle():
    # psi'(x) = int_0^inf t e^{-xt} / (1 - e^{-t}) dt
    x = 2.5
    val, _ = integrate.quad(lambda t: t * math.exp(-x * t) / -math.expm1(-t), 0, np.inf)
    assert trigamma(x) == pytest.approx(val, rel=1e-10)


# ---------------------------------------------------------------- SPD algebra


def _random_spd(K, gen):
    A = gen.standard_normal((K, K))
    return A @ A.T + K * np.eye(K)


def test_spd_solve_identity():
    B = np.arange(12.0).reshape(4, 3)
    assert np.allclose(spd_solve(np.eye(4), B), B)


def test_spd_solve_residual(gen):
    A = _random_spd(8, gen)
    B = gen.standard_normal((8, 3))
    X = spd_solve(A, B)
    assert np.abs(A @ X - B).max() < 1e-10 * np.abs(B).max()


def test_spd_factor_scalar_root():
    assert np.allclose(spd_factor(4.0 * np.eye(3)), 2.0 * np.eye(3))


def test_spd_factor_names_failing_pivot():
    A = np.diag([1.0, 2.0, -1.0])
    with pytest.raises(NotPositiveDefiniteError) as info:
        spd_factor(A)
    assert info.value.pivot == 2 and info.value.batch_index is None


def test_spd_factor_names_failing_matrix():
    stack = np.stack([np.eye(2), np.eye(2), np.array([[1.0, 2.0], [2.0, 1.0]])])
    with pytest.raises(NotPositiveDefiniteError) as info:
        spd_factor(stack)
    assert info.value.batch_index == 2 and info.value.pivot == 1


def test_batched_triangular_solves_match_scipy(gen):
    from scipy.linalg import solve_triangular

    A = np.stack([_random_spd(5, gen) for _ in range(4)])
    L = spd_factor(A)
    B = gen.standard_normal((4, 5, 2))
    fwd = tri_solve_lower(L, B)
    back = tri_solve_upper_t(L, B)
    for i in range(4):
        assert np.allclose(fwd[i], solve_triangular(L[i], B[i], lower=True))
        assert np.allclose(back[i], solve_triangular(L[i], B[i], lower=True, trans="T"))


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2**32 - 1))
def test_spd_solve_property(K, seed):
    g = np.random.default_rng(seed)
    A = _random_spd(K, g)
    b = g.standard_normal(K)
    x = spd_solve(A, b)
    assert x.shape == (K,)
    assert np.allclose(A @ x, b, atol=1e-9 * max(1.0, np.abs(b).max()))
