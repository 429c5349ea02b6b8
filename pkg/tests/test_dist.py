import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from cplxsparse import dist
from cplxsparse.ctensor import CTensor

EULER_GAMMA = 0.5772156649015329


# ---------------------------------------------------------------------------
# exponential integral
# ---------------------------------------------------------------------------

def test_ei_known_value():
    # Ei(-1) = -E1(1), a tabulated constant
    assert dist.ei(-1.0) == pytest.approx(-0.21938393439552026, rel=1e-12)


def test_ei_quadrature_oracle():
    # -Ei(-x) = integral_x^inf e^-t / t dt
    for x in (0.2, 1.0, 3.7):
        val, err = integrate.quad(lambda t: np.exp(-t) / t, x, np.inf)
        assert dist.ei(-x) == pytest.approx(-val, rel=max(1e-11, 4 * err))


@pytest.mark.parametrize("x", [-300.0, -30.0, -8.0, -6.0, -2.5, -1.0,
                               -0.3, -1e-3, -1e-8])
def test_ei_matches_scipy(x):
    assert dist.ei(x) == pytest.approx(float(special.expi(x)), rel=1e-10)


def test_ei_rejects_nonnegative():
    with pytest.raises(ValueError):
        dist.ei(0.0)
    with pytest.raises(ValueError):
        dist.ei(np.array([-1.0, 2.0]))


def test_ei_vectorized():
    xs = np.array([-3.0, -0.5, -0.07, -40.0])
    np.testing.assert_allclose(dist.ei(xs), special.expi(xs), rtol=1e-10)


def test_ei_derivative_is_exp_over_x():
    # d Ei/dx = e^x / x, checked by central differences
    for x in (-4.0, -0.7, -0.05):
        h = 1e-7 * max(1.0, abs(x))
        fd = (dist.ei(x + h) - dist.ei(x - h)) / (2 * h)
        assert fd == pytest.approx(np.exp(x) / x, rel=1e-6)


def test_ei_log_asymptotic_at_zero_minus():
    # Ei(x) - (log(-x) + gamma) -> 0 as x -> 0-
    for x in (-1e-4, -1e-6, -1e-8):
        assert dist.ei(x) - (np.log(-x) + EULER_GAMMA) == pytest.approx(
            0.0, abs=2 * abs(x))


def test_ei_exp_lower_bound():
    # Ei(x) >= -e^x for x <= -1
    xs = np.linspace(-40.0, -1.0, 300)
    assert np.all(dist.ei(xs) >= -np.exp(xs))


def test_ei_negative_arguments_bracketing():
    # -Ei(-x) decreasing in x > 0 and squeezed by the classic bounds
    # 0.5 e^-x ln(1 + 2/x) < -Ei(-x) < e^-x ln(1 + 1/x)
    xs = np.linspace(0.05, 20.0, 200)
    e1 = -dist.ei(-xs)
    assert np.all(np.diff(e1) < 0)
    lo = 0.5 * np.exp(-xs) * np.log1p(2.0 / xs)
    hi = np.exp(-xs) * np.log1p(1.0 / xs)
    assert np.all(e1 > lo)
    assert np.all(e1 < hi)


# ---------------------------------------------------------------------------
# ein: the entire-function variant used by the complex penalty
# ---------------------------------------------------------------------------

def test_ein_identity_with_ei():
    # ein(x) = gamma + ln x - Ei(-x) for x > 0
    for x in (1e-6, 1e-2, 0.5, 1.0, 4.0, 20.0):
        want = EULER_GAMMA + np.log(x) - dist.ei(-x)
        assert dist.ein(x) == pytest.approx(want, rel=1e-10, abs=1e-14)


def test_ein_at_one():
    assert dist.ein(1.0) == pytest.approx(
        EULER_GAMMA + 0.21938393439552026, rel=1e-12)


def test_ein_series_head():
    # ein(x) = x - x^2/4 + x^3/18 - ... so tiny arguments reduce to x
    for x in (1e-10, 1e-8):
        assert dist.ein(x) == pytest.approx(x, rel=1e-6)


def test_ein_quadrature_oracle():
    # ein(x) = integral_0^x (1 - e^-t)/t dt
    for x in (0.3, 1.7, 5.0):
        val, err = integrate.quad(lambda t: -np.expm1(-t) / t, 0.0, x)
        assert dist.ein(x) == pytest.approx(val, abs=max(1e-12, 10 * err))


def test_ein_nonnegative_increasing():
    xs = np.linspace(0.0, 40.0, 400)
    v = dist.ein(xs)
    assert v[0] == 0.0
    assert np.all(v >= 0.0)
    assert np.all(np.diff(v) > 0)


# ---------------------------------------------------------------------------
# Dawson integral
# ---------------------------------------------------------------------------

def test_dawson_known_value():
    assert dist.dawson(1.0) == pytest.approx(0.5380795069127684, rel=1e-12)


@pytest.mark.parametrize("x", [0.0, 0.1, 0.9, 2.0, 5.0, 12.0, 60.0])
def test_dawson_matches_scipy(x):
    assert dist.dawson(x) == pytest.approx(float(special.dawsn(x)),
                                           rel=1e-10, abs=1e-14)


def test_dawson_odd_and_asymptotic():
    xs = np.array([0.3, 1.1, 4.0])
    np.testing.assert_allclose(dist.dawson(-xs), -dist.dawson(xs), rtol=1e-12)
    # 2x D(x) -> 1 for large x
    big = 80.0
    assert 2 * big * dist.dawson(big) == pytest.approx(1.0, rel=1e-3)


# ---------------------------------------------------------------------------
# digamma
# ---------------------------------------------------------------------------

def test_digamma_known_values():
    assert dist.digamma(1.0) == pytest.approx(-EULER_GAMMA, rel=1e-12)
    assert dist.digamma(0.5) == pytest.approx(
        -EULER_GAMMA - 2.0 * np.log(2.0), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 40.0))
def test_digamma_recurrence(x):
    assert dist.digamma(x + 1.0) == pytest.approx(
        dist.digamma(x) + 1.0 / x, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("x", [0.07, 0.6, 1.0, 3.3, 11.0, 150.0])
def test_digamma_matches_scipy(x):
    assert dist.digamma(x) == pytest.approx(float(special.digamma(x)),
                                            rel=1e-10)


def test_digamma_rejects_nonpositive():
    with pytest.raises(ValueError):
        dist.digamma(0.0)


def test_digamma_chi2_log_moment():
    # E_{W ~ chi2_nu} log W = psi(nu/2) + log 2 for nu = 4
    rng = np.random.default_rng(99)
    w = rng.chisquare(4, size=1_000_000)
    lw = np.log(w)
    se = lw.std() / np.sqrt(lw.size)
    want = dist.digamma(2.0) + np.log(2.0)
    assert abs(lw.mean() - want) < 4 * se


# ---------------------------------------------------------------------------
# scalar complex Gaussian
# ---------------------------------------------------------------------------

def test_paired_real_cov_circular():
    d = dist.CGaussScalar(mu=1.0 + 2.0j, sigma2=4.0, xi=0.0)
    np.testing.assert_allclose(dist.paired_real_cov(d), 2.0 * np.eye(2))


def test_paired_real_cov_general():
    # with relation r = xi * sigma2 the 2x2 block is
    # [[(v + Re r)/2, Im r/2], [Im r/2, (v - Re r)/2]]
    d = dist.CGaussScalar(mu=0.0, sigma2=2.0, xi=0.3 + 0.4j)
    want = np.array([[1.3, 0.4], [0.4, 0.7]])
    np.testing.assert_allclose(dist.paired_real_cov(d), want, atol=1e-12)
    # trace is sigma2 regardless of xi, and |xi| = 1 is rank deficient
    dd = dist.CGaussScalar(mu=0.0, sigma2=1.0, xi=1.0)
    cov = dist.paired_real_cov(dd)
    assert np.trace(cov) == pytest.approx(1.0)
    assert np.linalg.det(cov) == pytest.approx(0.0, abs=1e-15)


def test_sample_cn_circular_moments():
    rng = np.random.default_rng(100)
    d = dist.CGaussScalar(mu=0.5 - 1.5j, sigma2=3.0, xi=0.0)
    z = dist.sample_cn(d, 200000, rng)
    zc = z.to_complex()
    n = zc.size
    se_m = np.sqrt(d.sigma2 / n)
    assert abs(zc.mean() - d.mu) < 4 * se_m
    v = np.mean(np.abs(zc - zc.mean()) ** 2)
    assert abs(v - 3.0) < 4 * 3.0 * np.sqrt(2.0 / n)
    rel = np.mean((zc - zc.mean()) ** 2)
    assert abs(rel) < 4 * 3.0 / np.sqrt(n)


def test_sample_cn_rejects_improper():
    rng = np.random.default_rng(101)
    d = dist.CGaussScalar(mu=0.0, sigma2=2.0, xi=0.5)
    with pytest.raises(ValueError):
        dist.sample_cn(d, 8, rng)


def test_sample_cn_zero_variance_is_exact():
    rng = np.random.default_rng(102)
    d = dist.CGaussScalar(mu=0.25 - 4.0j, sigma2=0.0, xi=0.0)
    z = dist.sample_cn(d, 1000, rng)
    assert np.all(z.re == 0.25)
    assert np.all(z.im == -4.0)


def test_xi_out_of_range_rejected():
    with pytest.raises(ValueError):
        dist.CGaussScalar(mu=0.0, sigma2=1.0, xi=1.5)
    with pytest.raises(ValueError):
        dist.CGaussScalar(mu=0.0, sigma2=-1.0)


def test_entropy_circular_formula():
    # h = log(pi e sigma2) in the circular case
    d = dist.CGaussScalar(mu=0.3 + 0.1j, sigma2=2.5, xi=0.0)
    want = np.log(np.pi * np.e * 2.5)
    assert dist.entropy_cn(d) == pytest.approx(want, rel=1e-12)
    # a nonzero relation strictly reduces entropy
    di = dist.CGaussScalar(mu=0.0, sigma2=2.5, xi=0.6)
    assert dist.entropy_cn(di) < want


def test_entropy_matches_mc():
    # estimate -E log p(z) by sampling the paired real law directly
    rng = np.random.default_rng(103)
    d = dist.CGaussScalar(mu=0.0, sigma2=1.8, xi=0.4 - 0.3j)
    cov = dist.paired_real_cov(d)
    pts = rng.multivariate_normal(np.zeros(2), cov, size=400000)
    inv = np.linalg.inv(cov)
    quad = np.einsum("ni,ij,nj->n", pts, inv, pts)
    logp = -0.5 * quad - np.log(2 * np.pi) - 0.5 * np.log(np.linalg.det(cov))
    mc = -logp.mean()
    se = logp.std() / np.sqrt(logp.size)
    assert abs(mc - dist.entropy_cn(d)) < 4 * se


def test_log_moment_identity():
    # E log|theta + z|^2 = log|theta|^2 - Ei(-|theta|^2) for z ~ CN(0,1,0)
    rng = np.random.default_rng(104)
    n = 400000
    z = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)
    for theta in (0.2, 1.0 + 0.5j, 3.0j):
        samp = np.log(np.abs(theta + z) ** 2)
        se = samp.std() / np.sqrt(n)
        assert abs(samp.mean() - dist.log_moment_cn(theta)) < 4 * se


def test_log_moment_plus_gamma_nonnegative():
    # the shifted moment gamma + log t - Ei(-t) = ein(t) >= 0
    mags = np.linspace(0.01, 6.0, 100)
    vals = np.array([dist.log_moment_cn(m) - np.log(m ** 2)
                     for m in mags])
    assert np.all(vals + np.log(mags ** 2) + EULER_GAMMA >= -1e-12)


def test_sample_cn_returns_ctensor():
    rng = np.random.default_rng(105)
    d = dist.CGaussScalar(mu=0.0, sigma2=1.0, xi=0.0)
    z = dist.sample_cn(d, 16, rng)
    assert isinstance(z, CTensor)
    assert z.shape == (16,)
