import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from zrstefan.lattice import TorusGrid
from zrstefan.zrmeasure import (
    DomainError,
    ThermoTable,
    affine_rate,
    chi2,
    linear_rate,
    rate_from_config,
    sample_product_config,
)


@pytest.fixture(scope="module")
def lin():
    return ThermoTable(linear_rate())


@pytest.fixture(scope="module")
def aff():
    return ThermoTable(affine_rate())


def series_oracle(g, alpha, terms=200):
    """High-precision truncated series: (Z, mean, variance)."""
    mpmath.mp.dps = 50
    a = mpmath.mpf(alpha)
    w, gf = [], mpmath.mpf(1)
    for k in range(terms):
        if k > 0:
            gf *= g(k)
        w.append(a**k / gf)
    Z = mpmath.fsum(w)
    m1 = mpmath.fsum(k * wk for k, wk in enumerate(w)) / Z
    m2 = mpmath.fsum(k * k * wk for k, wk in enumerate(w)) / Z
    return float(Z), float(m1), float(m2 - m1**2)


def g_aff(k):
    return k + 1


def density_oracle_inverse(rho):
    """Bisection on the high-precision series."""
    lo, hi = 0.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if series_oracle(g_aff, mid, 150)[1] < rho:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# frozen from series_oracle(g_aff, 2.0) and density_oracle_inverse(1.0)
AFF_Z2 = 3.1945280494653251
AFF_RHO2 = 1.3130352854993312
AFF_PHI1 = 1.5936242600400401
AFF_VAR_AT_RHO1 = 1.1872485200800795


def test_frozen_oracle_values_reproduce():
    Z, m, _ = series_oracle(g_aff, 2.0)
    assert Z == pytest.approx(AFF_Z2, rel=1e-15)
    assert Z == pytest.approx((math.exp(2) - 1) / 2, rel=1e-15)
    assert m == pytest.approx(AFF_RHO2, rel=1e-15)
    assert density_oracle_inverse(1.0) == pytest.approx(AFF_PHI1, rel=1e-12)
    assert series_oracle(g_aff, AFF_PHI1)[2] == pytest.approx(AFF_VAR_AT_RHO1, rel=1e-12)


def test_rate_catalog_conditions():
    linear_rate().validate()
    affine_rate(1.0).validate()
    affine_rate(2.5).validate()
    assert rate_from_config("affine", a=1.0).params == {"a": 1.0}
    with pytest.raises(DomainError):
        rate_from_config("constant")


def test_partition_function_examples(lin, aff):
    assert lin.partition_function(0.0) == 1.0
    assert lin.partition_function(1.0) == pytest.approx(math.e, rel=1e-15)
    assert aff.partition_function(2.0) == pytest.approx(AFF_Z2, rel=1e-14)
    with pytest.raises(DomainError):
        lin.partition_function(-0.1)


def test_mean_density_examples(lin, aff):
    for a in [0.0, 0.3, 2.0, 7.5]:
        assert lin.mean_density(a) == pytest.approx(a, rel=1e-13, abs=0)
    assert aff.mean_density(0.0) == 0.0
    assert aff.mean_density(2.0) == pytest.approx(AFF_RHO2, rel=1e-13)


def test_fugacity_of_density_examples(lin, aff):
    assert lin.fugacity_of_density(2.0) == pytest.approx(2.0, rel=1e-13)
    assert aff.fugacity_of_density(0.0) == 0.0
    a = aff.fugacity_of_density(1.0)
    assert a == pytest.approx(AFF_PHI1, rel=1e-12)
    assert abs(aff.mean_density(a) - 1.0) < 1e-12 * 2


def test_chi_examples(lin, aff):
    assert lin.chi1(3.0) == pytest.approx(3.0, rel=1e-13)
    assert chi2(0.0) == 0 and chi2(1.0) == 0 and chi2(0.5) == 0.25
    with pytest.raises(DomainError):
        chi2(1.5)
    assert aff.chi1(1.0) == pytest.approx(AFF_VAR_AT_RHO1, rel=1e-8)
    # chi1 = phi / phi'
    rho = np.array([0.2, 1.0, 3.0])
    assert np.allclose(aff.chi1(rho), aff.fugacity_of_density(rho) / aff.fugacity_derivative(rho), rtol=1e-12)


def test_phi_prime_against_finite_difference(aff):
    rho = np.array([0.05, 0.5, 1.0, 2.0])
    h = 1e-5
    fd = (aff.fugacity_of_density(rho + h) - aff.fugacity_of_density(rho - h)) / (2 * h)
    assert np.allclose(aff.fugacity_derivative(rho), fd, rtol=1e-7)
    # phi'(0) = g(1)
    assert aff.fugacity_derivative(0.0) == pytest.approx(2.0)
    assert aff.fugacity_derivative(1e-10) == pytest.approx(2.0, rel=1e-8)


def test_poisson_collapse(lin):
    alpha = np.linspace(0, 10, 101)
    assert np.allclose(lin.partition_function(alpha), np.exp(alpha), rtol=1e-12, atol=0)
    assert np.allclose(lin.mean_density(alpha), alpha, rtol=1e-12, atol=0)
    assert np.allclose(lin.chi1(alpha[1:]), alpha[1:], rtol=1e-12)


@pytest.mark.parametrize("which", ["lin", "aff"])
def test_round_trip_and_monotone(which, lin, aff):
    t = lin if which == "lin" else aff
    alpha = np.linspace(0, 20, 201)
    rho = t.mean_density(alpha)
    back = t.fugacity_of_density(rho)
    assert np.allclose(back, alpha, rtol=1e-10, atol=0)
    assert np.all(np.diff(rho) > 0)
    assert np.all(np.diff(back) > 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 15.0))
def test_chi1_positive_and_matches_series(rho):
    t = ThermoTable(affine_rate())
    a = t.fugacity_of_density(rho)
    _, m, var = series_oracle(g_aff, a, 250)
    assert m == pytest.approx(rho, rel=1e-10)
    assert t.chi1(rho) > 0
    assert t.chi1(rho) == pytest.approx(var, rel=1e-8)


def test_truncation_tail_certified(aff):
    # the last retained term is negligible against Z at the largest fugacity
    p = aff.pmf(aff.alpha_max)
    assert p[-1] < 1e-16


def test_sample_site_zero_density(aff):
    rng = np.random.default_rng(0)
    assert aff.sample_site(0.0, rng) == 0
    assert np.all(aff.sample_site(0.0, rng, size=100) == 0)


def test_sample_site_poisson_mean(lin):
    rng = np.random.default_rng(1)
    n = 10**6
    x = lin.sample_site(2.0, rng, size=n)
    assert abs(x.mean() - 2.0) < 3 * math.sqrt(2.0 / n)


def test_sample_site_pmf_buckets(aff):
    rng = np.random.default_rng(2)
    n = 10**6
    x = aff.sample_site(1.0, rng, size=n)
    mpmath.mp.dps = 30
    weights = []
    gf = 1.0
    for k in range(40):
        if k:
            gf *= g_aff(k)
        weights.append(AFF_PHI1**k / gf)
    pmf = np.array(weights) / sum(weights)
    counts = np.bincount(x, minlength=40)[:40]
    sigma = np.sqrt(n * pmf * (1 - pmf))
    big = pmf * n > 5
    assert np.all(np.abs(counts[big] - n * pmf[big]) < 4 * sigma[big])
    # chi-squared goodness of fit with the tail pooled
    kcut = int(np.max(np.nonzero(big)))
    obs = np.append(counts[: kcut + 1], n - counts[: kcut + 1].sum())
    exp = np.append(n * pmf[: kcut + 1], n * (1 - pmf[: kcut + 1].sum()))
    assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_sample_product_config_examples(aff):
    g = TorusGrid(1, 50)
    rng = np.random.default_rng(3)
    cfg = sample_product_config(g, np.zeros(50), np.zeros(50), aff, rng)
    assert cfg.n1 == 0 and cfg.n2 == 0
    cfg = sample_product_config(g, np.ones(50), np.ones(50), aff, rng)
    assert np.all(cfg.eta2 == 1)
    with pytest.raises(DomainError):
        sample_product_config(g, -np.ones(50), np.zeros(50), aff, rng)
    with pytest.raises(DomainError):
        sample_product_config(g, np.ones(50), np.full(50, 1.2), aff, rng)


def test_product_config_density_clt(aff):
    g = TorusGrid(1, 128)
    rho = 1.0
    rng = np.random.default_rng(4)
    dens = np.array([
        sample_product_config(g, np.full(g.size, rho), np.zeros(g.size), aff, rng).n1 / g.size
        for _ in range(400)
    ])
    se = math.sqrt(aff.chi1(rho) / g.size)
    assert abs(dens.mean() - rho) < 4 * se / math.sqrt(400)
    assert dens.std(ddof=1) == pytest.approx(se, rel=0.15)
