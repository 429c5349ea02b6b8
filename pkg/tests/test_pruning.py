import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cplxsparse import pruning as pr
from cplxsparse import varlayers as vl


def real_layer_with_log_alpha(la, seed=0):
    la = np.asarray(la, dtype=np.float64)
    rng = np.random.default_rng(seed)
    layer = vl.VarLinear(la.shape[1], la.shape[0],
                         vl.PenaltySpec("rvd"), rng)
    layer.log_sigma2.value.data[...] = \
        la + np.log(layer.mu.value.data ** 2 + vl.EPS_NUM)
    return layer


def complex_layer_with_log_alpha(la, seed=0):
    la = np.asarray(la, dtype=np.float64)
    rng = np.random.default_rng(seed)
    layer = vl.VarLinear(la.shape[1], la.shape[0],
                         vl.PenaltySpec("cvd"), rng)
    layer.log_sigma2.value.data[...] = la + np.log(layer._abs2_mu()
                                                   + vl.EPS_NUM)
    return layer


# ---------------------------------------------------------------------------
# mask computation
# ---------------------------------------------------------------------------

def test_threshold_keeps_small_alpha():
    layer = real_layer_with_log_alpha([[-1.0, 0.0, -3.0]])
    mask = pr.compute_masks(layer, tau=-0.5)
    np.testing.assert_array_equal(mask.masks["varlinear"],
                                  [[True, False, True]])


def test_ties_are_retained():
    layer = real_layer_with_log_alpha([[-0.5, -0.5 + 1e-9]])
    mask = pr.compute_masks(layer, tau=-0.5)
    np.testing.assert_array_equal(mask.masks["varlinear"],
                                  [[True, False]])


def test_default_tau():
    assert pr.DEFAULT_TAU == -0.5


def test_float_accounting_real():
    # 1x3 real weights + 1 real bias: 4 floats, one weight pruned
    layer = real_layer_with_log_alpha([[-1.0, 0.0, -3.0]])
    mask = pr.compute_masks(layer, tau=-0.5)
    assert mask.n_par == 4
    assert mask.n_zer == 1
    assert mask.n_fixed == 1
    assert pr.compression_rate(mask) == pytest.approx(4.0 / 3.0)


def test_float_accounting_complex():
    # complex counts two floats per value, in weights and biases alike
    la = np.full((10, 10), 5.0)
    la[0, :] = -5.0  # keep ten weights
    layer = complex_layer_with_log_alpha(la)
    mask = pr.compute_masks(layer)
    assert mask.n_par == 220
    assert mask.n_zer == 180
    assert mask.n_fixed == 20
    assert pr.compression_rate(mask) == pytest.approx(5.5)


def test_rate_on_hand_built_mask():
    mask = pr.SparsityMask(masks={}, n_par=210, n_zer=180, n_fixed=10)
    assert pr.compression_rate(mask) == pytest.approx(7.0)


def test_extreme_taus():
    la = np.linspace(-6, 6, 12).reshape(3, 4)
    layer = complex_layer_with_log_alpha(la)
    low = pr.compute_masks(layer, tau=-1e9)
    high = pr.compute_masks(layer, tau=1e9)
    assert low.n_zer == 24  # every weight gone
    assert high.n_zer == 0
    assert pr.compression_rate(high) == pytest.approx(1.0)
    # with all weights pruned only the biases remain
    assert pr.compression_rate(low) == pytest.approx(
        pr.compression_limit(low))


def test_compression_rate_errors_when_nothing_survives():
    mask = pr.SparsityMask(masks={}, n_par=10, n_zer=10, n_fixed=0)
    with pytest.raises(ValueError, match="pruned"):
        pr.compression_rate(mask)


def test_compression_limit():
    mask = pr.SparsityMask(masks={}, n_par=220, n_zer=0, n_fixed=20)
    assert pr.compression_limit(mask) == pytest.approx(11.0)
    with pytest.raises(ValueError):
        pr.compression_limit(pr.SparsityMask(masks={}, n_par=5, n_zer=0,
                                             n_fixed=0))


def test_mask_validates_counts():
    with pytest.raises(ValueError):
        pr.SparsityMask(masks={}, n_par=3, n_zer=4, n_fixed=0)
    with pytest.raises(ValueError):
        pr.SparsityMask(masks={}, n_par=3, n_zer=0, n_fixed=4)


def test_sequential_masks_keyed_by_layer_name():
    rng = np.random.default_rng(3)
    model = vl.Sequential([
        vl.VarLinear(4, 3, vl.PenaltySpec("cvd"), rng),
        vl.Relu(),
        vl.VarLinear(3, 2, vl.PenaltySpec("cvd"), rng),
    ])
    mask = pr.compute_masks(model, tau=1e9)
    assert set(mask.masks) == {"layer0", "layer1"}
    assert mask.n_par == (12 + 3 + 6 + 2) * 2


def test_model_without_var_layers_rejected():
    with pytest.raises(ValueError):
        pr.compute_masks(object())
    with pytest.raises(ValueError):
        pr.compute_masks(vl.Sequential([vl.Relu()]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-8, 8), min_size=1, max_size=24),
       st.floats(-6, 6), st.floats(0, 4))
def test_masks_nest_and_rate_decreases_in_tau(las, tau, bump):
    la = np.asarray(las).reshape(1, -1)
    layer = real_layer_with_log_alpha(la)
    m1 = pr.compute_masks(layer, tau=tau)
    m2 = pr.compute_masks(layer, tau=tau + bump)
    k1 = m1.masks["varlinear"]
    k2 = m2.masks["varlinear"]
    assert np.all(k2[k1])  # everything kept at tau stays kept at tau+bump
    assert m1.n_zer >= m2.n_zer
    r1 = pr.compression_rate(m1)
    r2 = pr.compression_rate(m2)
    assert r1 >= r2 - 1e-12


# ---------------------------------------------------------------------------
# tolerance-derived thresholds
# ---------------------------------------------------------------------------

def test_threshold_complex_closed_form():
    # Q_2(0.9) = -2 ln 0.1; log(2 * 0.25 / Q) = -2.2203...
    got = pr.threshold_for_tolerance(0.5, 0.9, k=2)
    want = math.log(0.5 / (-2.0 * math.log(0.1)))
    assert got == pytest.approx(want, rel=1e-12)
    assert got == pytest.approx(-2.2203, abs=1e-4)


def test_threshold_real_matches_chi2_quantile():
    got = pr.threshold_for_tolerance(0.5, 0.9, k=1)
    q = stats.chi2.ppf(0.9, df=1)
    assert q == pytest.approx(2.705543454095404, rel=1e-12)
    assert got == pytest.approx(math.log(0.25 / q), abs=1e-8)
    assert got == pytest.approx(-2.3816, abs=1e-4)


def test_both_thresholds_near_canonical_tau():
    for k in (1, 2):
        t = pr.threshold_for_tolerance(0.5, 0.9, k)
        assert abs(t - (-2.5)) < 0.3


def test_threshold_vs_scipy_grid():
    for k in (1, 2):
        for prob in (0.5, 0.75, 0.9, 0.99):
            for delta in (0.1, 0.5, 0.9):
                got = pr.threshold_for_tolerance(delta, prob, k)
                want = math.log(k * delta * delta
                                / stats.chi2.ppf(prob, df=k))
                assert got == pytest.approx(want, rel=1e-6), (k, prob, delta)


def test_threshold_grows_as_prob_shrinks():
    t1 = pr.threshold_for_tolerance(0.5, 1e-3, k=2)
    t2 = pr.threshold_for_tolerance(0.5, 0.5, k=2)
    t3 = pr.threshold_for_tolerance(0.5, 0.999, k=2)
    assert t1 > t2 > t3
    assert t1 > 5.0


def test_threshold_validation():
    with pytest.raises(ValueError):
        pr.threshold_for_tolerance(0.0, 0.9, 2)
    with pytest.raises(ValueError):
        pr.threshold_for_tolerance(1.5, 0.9, 2)
    with pytest.raises(ValueError):
        pr.threshold_for_tolerance(0.5, 0.0, 2)
    with pytest.raises(ValueError):
        pr.threshold_for_tolerance(0.5, 1.0, 2)
    with pytest.raises(ValueError):
        pr.threshold_for_tolerance(0.5, 0.9, 3)


@pytest.mark.parametrize("k", [1, 2])
def test_threshold_monte_carlo_coverage(k):
    # at alpha = exp(threshold) the event |w-mu| <= delta|mu| has
    # probability exactly prob; empirical coverage must agree within MC error
    delta, prob = 0.5, 0.9
    alpha = math.exp(pr.threshold_for_tolerance(delta, prob, k))
    rng = np.random.default_rng(123)
    n = 200000
    if k == 2:
        eps = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) \
            / np.sqrt(2.0)
    else:
        eps = rng.standard_normal(n)
    dev = np.sqrt(alpha) * np.abs(eps)  # |w-mu| / |mu|
    emp = np.mean(dev <= delta)
    se = math.sqrt(prob * (1 - prob) / n)
    assert abs(emp - prob) < 4 * se
