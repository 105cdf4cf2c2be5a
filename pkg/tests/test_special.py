"""Special-function accuracy against scipy and against frozen references.

scipy is a test-only dependency here: the package computes these functions
in-house, and these tests pin the implementation to an independent source.
"""

import math

import numpy as np
import pytest
from scipy import special as ss

from distdyn import special
from distdyn.errors import DomainError


@pytest.mark.parametrize("a", [0.01, 0.3, 0.5, 0.97, 1.0, 2.5, 7.3, 25.0, 80.0, 300.0])
def test_reg_lower_gamma_matches_scipy(a):
    rng = np.random.default_rng(1234)
    x = np.concatenate([[0.0], rng.uniform(0.0, 4.0 * a + 20.0, 3000)])
    p = special.reg_lower_gamma(a, x)
    np.testing.assert_allclose(p, ss.gammainc(a, x), atol=1e-10, rtol=0)


@pytest.mark.parametrize("a", [0.5, 0.97, 2.5, 25.0])
def test_reg_upper_gamma_tail_relative_accuracy(a):
    # the tail-weighted divergence takes log of survival values, so the
    # upper function must hold *relative* accuracy deep into the tail
    x = np.linspace(0.1, 200.0, 4000)
    q = special.reg_upper_gamma(a, x)
    qs = ss.gammaincc(a, x)
    keep = qs > 1e-280
    np.testing.assert_allclose(q[keep], qs[keep], rtol=1e-9, atol=0)


def test_reg_gamma_complementarity():
    rng = np.random.default_rng(7)
    for a in (0.4, 1.7, 12.0):
        x = rng.uniform(0, 6 * a, 500)
        p = special.reg_lower_gamma(a, x)
        q = special.reg_upper_gamma(a, x)
        np.testing.assert_allclose(p + q, 1.0, atol=5e-14)


def test_reg_gamma_edge_values():
    assert special.reg_lower_gamma(1.5, 0.0) == 0.0
    assert special.reg_lower_gamma(1.5, np.inf) == 1.0
    assert special.reg_upper_gamma(1.5, 0.0) == 1.0
    assert special.reg_upper_gamma(1.5, np.inf) == 0.0
    # scalar in, scalar out
    assert isinstance(special.reg_lower_gamma(2.0, 1.0), float)


def test_reg_gamma_domain_errors():
    with pytest.raises(DomainError):
        special.reg_lower_gamma(0.0, 1.0)
    with pytest.raises(DomainError):
        special.reg_lower_gamma(-1.0, 1.0)
    with pytest.raises(DomainError):
        special.reg_lower_gamma(2.0, -0.5)
    with pytest.raises(DomainError):
        special.reg_upper_gamma(2.0, np.array([1.0, -2.0]))


def test_erf_and_erfc_match_scipy():
    z = np.concatenate([np.linspace(-9, 9, 1501), [0.0, -0.0]])
    np.testing.assert_allclose(special.erf(z), ss.erf(z), atol=1e-12, rtol=0)
    ec = special.erfc(z)
    ecs = ss.erfc(z)
    np.testing.assert_allclose(ec, ecs, atol=1e-12, rtol=0)
    deep = ecs > 1e-280
    np.testing.assert_allclose(ec[deep], ecs[deep], rtol=1e-9, atol=0)


def test_erf_known_values():
    # Abramowitz & Stegun table values
    assert special.erf(1.0) == pytest.approx(0.8427007929497149, abs=1e-12)
    assert special.erf(0.5) == pytest.approx(0.5204998778130465, abs=1e-12)
    assert special.erfc(2.0) == pytest.approx(0.004677734981063127, rel=1e-10)


def test_normal_cdf():
    z = np.linspace(-8, 8, 801)
    np.testing.assert_allclose(special.normal_cdf(z), ss.ndtr(z), atol=1e-12)
    assert special.normal_cdf(0.0) == pytest.approx(0.5, abs=1e-15)
    # symmetry
    assert special.normal_cdf(1.2345) + special.normal_cdf(-1.2345) == pytest.approx(1.0, abs=1e-14)


def test_digamma_trigamma_match_scipy():
    xs = [0.003, 0.1, 0.5, 0.97, 1.0, 1.5, 4.2, 8.0, 33.3, 250.0]
    for x in xs:
        assert special.digamma(x) == pytest.approx(ss.digamma(x), rel=1e-11, abs=1e-11)
        assert special.trigamma(x) == pytest.approx(ss.polygamma(1, x), rel=1e-10)


def test_digamma_recurrence_property():
    # psi(x+1) = psi(x) + 1/x, for random positive x
    rng = np.random.default_rng(99)
    for x in rng.uniform(0.05, 20.0, 50):
        lhs = special.digamma(x + 1.0)
        rhs = special.digamma(x) + 1.0 / x
        assert lhs == pytest.approx(rhs, rel=1e-11, abs=1e-12)


def test_digamma_domain():
    with pytest.raises(DomainError):
        special.digamma(0.0)
    with pytest.raises(DomainError):
        special.trigamma(-3.0)
    with pytest.raises(DomainError):
        special.log_gamma(-1.0)


def test_log_gamma_half_integer():
    # Gamma(1/2) = sqrt(pi)
    assert special.log_gamma(0.5) == pytest.approx(math.log(math.sqrt(math.pi)), abs=1e-14)
