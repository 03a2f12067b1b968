import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats as sps

from graphma.errors import ConvergenceError, ValidationError
from graphma.stats import (GammaFit, digamma, gamma_cdf, gamma_mle_fit, gamma_pdf, gammainc,
                           ks_statistic, regularized_lower_incomplete_gamma, sample_gamma,
                           trigamma)


def test_incomplete_gamma_known_values():
    assert abs(regularized_lower_incomplete_gamma(1.0, math.log(2.0)) - 0.5) <= 1e-12
    assert abs(regularized_lower_incomplete_gamma(0.5, 1.0) - math.erf(1.0)) <= 1e-9
    assert regularized_lower_incomplete_gamma(3.0, 0.0) == 0.0
    assert gammainc(2.0, np.array([np.inf]))[0] == 1.0


@pytest.mark.parametrize("s", [0.05, 0.5, 1.0, 2.5, 10.0, 80.0, 500.0])
def test_incomplete_gamma_matches_scipy(s):
    x = np.concatenate([np.linspace(0, 3 * s + 10, 200), [1e-8, s + 1.0]])
    np.testing.assert_allclose(gammainc(s, x), special.gammainc(s, x), rtol=1e-11, atol=1e-14)


def test_incomplete_gamma_errors():
    with pytest.raises(ValidationError):
        gammainc(0.0, [1.0])
    with pytest.raises(ValidationError):
        gammainc(1.0, [-1.0])


@pytest.mark.parametrize("x", [1e-3, 0.1, 0.5, 1.0, 3.7, 6.0, 25.0, 1e4])
def test_digamma_trigamma_match_scipy(x):
    assert digamma(x) == pytest.approx(special.digamma(x), rel=1e-12, abs=1e-12)
    assert trigamma(x) == pytest.approx(special.polygamma(1, x), rel=1e-12)


def test_digamma_domain():
    with pytest.raises(ValidationError):
        digamma(0.0)
    with pytest.raises(ValidationError):
        trigamma(-1.0)


def test_gamma_cdf_pdf_match_scipy():
    fit = GammaFit(2.3, -1.5, 0.7)
    x = np.linspace(-2, 8, 101)
    ref = sps.gamma(2.3, loc=-1.5, scale=0.7)
    np.testing.assert_allclose(gamma_cdf(x, fit), ref.cdf(x), atol=1e-13)
    np.testing.assert_allclose(gamma_pdf(x, fit), ref.pdf(x), rtol=1e-11, atol=1e-15)
    assert isinstance(gamma_cdf(1.0, fit), float)


def test_gamma_fit_rejects_bad_parameters():
    with pytest.raises(ValidationError):
        GammaFit(0.0, 0.0, 1.0)
    with pytest.raises(ValidationError):
        GammaFit(1.0, float("nan"), 1.0)


def test_gamma_mle_recovers_parameters():
    rng = np.random.default_rng(11)
    x = rng.gamma(3.0, 2.0, size=40_000) + 5.0
    fit = gamma_mle_fit(x)
    assert fit.shape == pytest.approx(3.0, rel=0.05)
    assert fit.scale == pytest.approx(2.0, rel=0.05)
    assert fit.loc < x.min()
    assert fit.n == x.size and fit.iterations >= 1


def test_gamma_mle_shape_solves_likelihood_equation():
    # oracle: at the plug-in loc the MLE shape satisfies log a - psi(a) = s
    x = np.random.default_rng(2).gamma(1.7, 1.0, size=2000)
    fit = gamma_mle_fit(x)
    y = x - fit.loc
    s = np.log(y.mean()) - np.log(y).mean()
    assert math.log(fit.shape) - special.digamma(fit.shape) == pytest.approx(s, rel=1e-9)
    assert fit.scale == pytest.approx(y.mean() / fit.shape, rel=1e-12)


def test_gamma_mle_errors():
    with pytest.raises(ValidationError):
        gamma_mle_fit(np.arange(10.0))
    with pytest.raises(ValidationError):
        gamma_mle_fit(np.ones(50))
    with pytest.raises(ValidationError):
        gamma_mle_fit(np.append(np.arange(40.0), np.nan))
    with pytest.raises(ConvergenceError):
        gamma_mle_fit(np.random.default_rng(0).gamma(2.0, size=100), max_iter=1, tol=0.0)


def test_sample_gamma_distribution_and_determinism():
    fit = GammaFit(0.6, 1.0, 2.0)
    a = sample_gamma(fit, 20_000, np.random.default_rng(5))
    b = sample_gamma(fit, 20_000, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert a.min() > 1.0
    assert sps.kstest(a, sps.gamma(0.6, loc=1.0, scale=2.0).cdf).statistic < 0.015
    big = sample_gamma(GammaFit(4.0, 0.0, 1.0), 20_000, np.random.default_rng(6))
    assert sps.kstest(big, sps.gamma(4.0).cdf).statistic < 0.015


def test_ks_matches_scipy():
    rng = np.random.default_rng(3)
    for n in (1, 7, 100, 999):
        x = rng.normal(size=n)
        assert ks_statistic(x, sps.norm.cdf) == pytest.approx(
            sps.kstest(x, sps.norm.cdf).statistic, abs=1e-14)


def test_ks_plugin_quantiles_half_step():
    n = 64
    x = (np.arange(1, n + 1) - 0.5) / n
    assert ks_statistic(x, lambda v: v) == pytest.approx(1.0 / (2 * n), abs=1e-15)


def test_ks_errors():
    with pytest.raises(ValidationError):
        ks_statistic([], lambda v: v)
    with pytest.raises(ValidationError):
        ks_statistic([np.nan], lambda v: v)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 50.0), st.floats(0.0, 200.0))
def test_property_incomplete_gamma_in_unit_interval_and_matches_scipy(s, x):
    p = regularized_lower_incomplete_gamma(s, x)
    assert 0.0 <= p <= 1.0
    assert p == pytest.approx(special.gammainc(s, x), abs=1e-11)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=60))
def test_property_ks_in_unit_interval(xs):
    d = ks_statistic(xs, sps.norm.cdf)
    assert 0.0 <= d <= 1.0
