"""Scalar complex Gaussian distributions and the special functions they need.

The scalar law CN(mu, sigma2, xi) is parameterized by a complex mean, a total
variance sigma2 = E|z - mu|^2, and a relation coefficient xi with
E(z - mu)^2 = sigma2 * xi, |xi| <= 1.  xi = 0 is the circularly symmetric
case, where the real and imaginary parts are independent N(., sigma2/2).

Special functions are evaluated in float64 with two-regime schemes chosen so
no catastrophic cancellation occurs anywhere the library calls them:

* ei(x), x < 0: power series gamma + log(-x) + sum x^k/(k k!) for |x| <= 6,
  a Lentz continued fraction for E1(-x) beyond.
* ein(x), x >= 0: the complementary integral gamma + log(x) - ei(-x),
  computed from its own everywhere-positive series for x <= 6 so the log
  cancellation never happens.  ein(1/alpha) is the variational penalty of a
  circular complex Gaussian against the scale-free prior.
* dawson(x): positive-term confluent series below 6, asymptotic tail above.
* digamma(x): recurrence lift plus the Bernoulli asymptotic series.
"""

from dataclasses import dataclass

import numpy as np

from .ctensor import CTensor

EULER_GAMMA = 0.5772156649015328606

_SERIES_ITERS = 72
_LENTZ_ITERS = 64
_TINY = 1e-300


# ---------------------------------------------------------------------------
# exponential integrals
# ---------------------------------------------------------------------------

def _ei_series(x):
    # Ei(x) = gamma + log(-x) + sum_{k>=1} x^k / (k k!)  for x < 0
    term = x.copy()
    total = x.copy()
    for k in range(1, _SERIES_ITERS):
        term = term * x * k / ((k + 1.0) ** 2)
        total += term
    return EULER_GAMMA + np.log(-x) + total


def _e1_cf(x):
    # E1(x) = exp(-x) / (x + 1 - 1/(x + 3 - 4/(x + 5 - 9/(x + 7 - ...))))
    # evaluated with the modified Lentz scheme, elementwise over x > 6.
    b = x + 1.0
    c = np.full_like(x, 1.0 / _TINY)
    d = 1.0 / b
    f = d.copy()
    for k in range(1, _LENTZ_ITERS):
        a = -float(k * k)
        b = b + 2.0
        d = 1.0 / np.maximum(b + a * d, _TINY)
        c = b + a / c
        f = f * (c * d)
    return np.exp(-x) * f


def ei(x):
    """Exponential integral Ei(x) for strictly negative arguments.

    Accepts scalars or arrays; raises ValueError when any entry is >= 0.
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr >= 0):
        raise ValueError("ei: argument must be strictly negative")
    out = np.empty_like(arr)
    near = arr >= -6.0
    if near.any():
        out[near] = _ei_series(arr[near])
    if (~near).any():
        out[~near] = -_e1_cf(-arr[~near])
    return out if out.ndim else float(out)


def ein(x):
    """Complementary exponential integral Ein(x) = gamma + log(x) - Ei(-x), x >= 0.

    Computed from the cancellation-free series sum_{k>=1} (-1)^{k+1} x^k/(k k!)
    for x <= 6; nonnegative, zero at zero, asymptotically gamma + log(x).
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("ein: argument must be nonnegative")
    out = np.empty_like(arr)
    near = arr <= 6.0
    if near.any():
        a = arr[near]
        term = a.copy()
        total = a.copy()
        for k in range(1, _SERIES_ITERS):
            term = term * (-a) * k / ((k + 1.0) ** 2)
            total += term
        out[near] = total
    far = ~near
    if far.any():
        a = arr[far]
        out[far] = EULER_GAMMA + np.log(a) + _e1_cf(a)
    return out if out.ndim else float(out)


def dawson(x):
    """Dawson integral D(x) = exp(-x^2) * int_0^x exp(t^2) dt.

    Odd in x.  Below |x| = 6 the positive-term series
    x exp(-x^2) sum_k x^{2k} / ((2k+1) k!) is used; above, the asymptotic
    expansion truncated at its smallest term (relative error ~1e-11 at the
    switch point, far better elsewhere).
    """
    arr = np.asarray(x, dtype=np.float64)
    sign = np.sign(arr)
    a = np.abs(arr)
    out = np.empty_like(a)
    near = a <= 6.0
    if near.any():
        z = a[near]
        z2 = z * z
        term = np.ones_like(z)
        total = np.ones_like(z)
        for k in range(1, 160):
            term = term * z2 / k
            total += term / (2.0 * k + 1.0)
        out[near] = z * np.exp(-z2) * total
    far = ~near
    if far.any():
        z = a[far]
        inv2z2 = 1.0 / (2.0 * z * z)
        term = np.ones_like(z)
        total = np.ones_like(z)
        live = np.ones_like(z, dtype=bool)
        for k in range(1, 40):
            nxt = term * (2.0 * k - 1.0) * inv2z2
            live &= nxt < term          # stop before the divergent tail
            total = np.where(live, total + nxt, total)
            term = np.where(live, nxt, term)
        out[far] = total / (2.0 * z)
    out = sign * out
    return out if out.ndim else float(out)


def digamma(x):
    """Digamma psi(x) for x > 0 via recurrence lift and asymptotic series."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr <= 0):
        raise ValueError("digamma: argument must be positive")
    z = arr.copy().astype(np.float64)
    acc = np.zeros_like(z)
    for _ in range(10):
        small = z < 10.0
        if not small.any():
            break
        acc[small] -= 1.0 / z[small]
        z[small] += 1.0
    inv2 = 1.0 / (z * z)
    series = (
        np.log(z)
        - 0.5 / z
        - inv2 * (1.0 / 12.0
                  - inv2 * (1.0 / 120.0
                            - inv2 * (1.0 / 252.0
                                      - inv2 * (1.0 / 240.0
                                                - inv2 * (1.0 / 132.0)))))
    )
    out = acc + series
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# scalar complex Gaussian
# ---------------------------------------------------------------------------

@dataclass
class CGaussScalar:
    """Scalar complex Gaussian CN(mu, sigma2, xi)."""

    mu: complex
    sigma2: float
    xi: complex = 0.0

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError(f"CGaussScalar: sigma2 must be >= 0, got {self.sigma2}")
        if abs(self.xi) > 1.0 + 1e-12:
            raise ValueError(f"CGaussScalar: |xi| must be <= 1, got {abs(self.xi)}")


def paired_real_cov(d: CGaussScalar) -> np.ndarray:
    """Covariance of (Re z, Im z): 0.5 * [[s2(1+Re xi), s2 Im xi],
    [s2 Im xi, s2(1-Re xi)]]."""
    s2 = d.sigma2
    xr, xi_ = np.real(d.xi), np.imag(d.xi)
    return 0.5 * np.array([[s2 * (1.0 + xr), s2 * xi_],
                           [s2 * xi_, s2 * (1.0 - xr)]])


def sample_cn(d: CGaussScalar, n: int, rng: np.random.Generator) -> CTensor:
    """Draw n samples from a circular CN(mu, sigma2, 0).

    The relation coefficient must be zero: the training pipeline only ever
    samples circular noise, and improper sampling is handled where the 2x2
    covariance is actually formed.  sigma2 = 0 returns the mean exactly.
    """
    if d.xi != 0:
        raise ValueError("sample_cn: only circular (xi = 0) sampling is supported")
    s = np.sqrt(d.sigma2 / 2.0)
    e1 = rng.standard_normal(n)
    e2 = rng.standard_normal(n)
    return CTensor(np.real(d.mu) + s * e1, np.imag(d.mu) + s * e2)


def entropy_cn(d: CGaussScalar) -> float:
    """Differential entropy log(pi e sigma2) + 0.5 log(1 - |xi|^2)."""
    if d.sigma2 <= 0:
        raise ValueError("entropy_cn: sigma2 must be positive")
    x2 = abs(d.xi) ** 2
    if x2 >= 1.0:
        raise ValueError("entropy_cn: degenerate law with |xi| = 1")
    return float(np.log(np.pi * np.e * d.sigma2) + 0.5 * np.log1p(-x2))


def log_moment_cn(theta) -> float:
    """E log|theta + z|^2 for z ~ CN(0, 1, 0): log|theta|^2 - Ei(-|theta|^2).

    Evaluated as ein(|theta|^2) - gamma, which is exact in the limit
    theta -> 0 (value -gamma) instead of the indeterminate -inf + inf.
    """
    t2 = abs(complex(theta)) ** 2
    return float(ein(t2)) - EULER_GAMMA
