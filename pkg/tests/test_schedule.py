import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffcount.schedule import NoiseSchedule, build_schedule, snr_weight, weight_at

# prod_{t=1}^{1000} (1 - beta_t) for the linear 1e-3 -> 0.02 schedule,
# evaluated once at 40 significant digits with mpmath and frozen here.
ALPHA_BAR_T = 0.000025651520502397549512


def brute_alpha_bars(betas):
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return np.array(out)


def test_single_step_schedule():
    s = build_schedule(1, 1e-3, 1e-3)
    assert s.alpha_bars[0] == pytest.approx(0.999, rel=1e-15)
    assert s.betas[0] == 1e-3


def test_alpha_bar_T_against_frozen_oracle():
    s = build_schedule()
    assert s.alpha_bars[-1] == pytest.approx(ALPHA_BAR_T, rel=1e-10)


def test_betas_linear_endpoints_inclusive():
    s = build_schedule()
    assert s.betas[0] == 1e-3
    assert s.betas[-1] == pytest.approx(0.02, rel=1e-15)
    t = np.arange(1, 1001)
    np.testing.assert_allclose(s.betas, 1e-3 + (t - 1) / 999 * (0.02 - 1e-3), rtol=1e-13)


def test_alpha_bars_match_running_product():
    s = build_schedule()
    np.testing.assert_allclose(s.alpha_bars, brute_alpha_bars(s.betas), rtol=1e-12)


def test_monotone_alpha_bar_and_snr():
    s = build_schedule()
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all(np.diff(s.snrs) < 0)


def test_lambda_hand_value():
    # abar = 0.999, beta = 1e-3 -> SNR 999, lambda = 0.999 / sqrt(1000)
    lam = snr_weight(1e-3, 0.999, 1.0, 0.5)
    assert lam == pytest.approx(0.999 / math.sqrt(1000.0), rel=1e-12)
    assert lam == pytest.approx(0.031594, abs=5e-6)
    s = build_schedule(1, 1e-3, 1e-3)
    assert s.lambdas[0] == pytest.approx(lam, rel=1e-12)


def test_lambda_recomputation_every_step():
    s = build_schedule()
    for t in range(1, 1001):
        b, ab = s.betas[t - 1], s.alpha_bars[t - 1]
        expect = ((1 - b) * (1 - ab) / b) / (1 + ab / (1 - ab)) ** 0.5
        assert weight_at(s, t) == pytest.approx(expect, rel=1e-12)


def test_large_k_limit():
    k = 1e12
    s = build_schedule(k=k)
    limit = (1 - s.betas) * (1 - s.alpha_bars) / s.betas * k ** -0.5
    np.testing.assert_allclose(s.lambdas / limit, 1.0, rtol=1e-6)


def test_lambda_finite_positive_random_probe():
    s = build_schedule()
    rng = np.random.default_rng(0)
    for t in rng.integers(1, 1000, size=10):
        a, b = weight_at(s, int(t)), weight_at(s, int(t) + 1)
        assert np.isfinite([a, b]).all() and a > 0 and b > 0


@pytest.mark.parametrize("t", [0, 1001, -3])
def test_weight_at_out_of_range(t):
    with pytest.raises(IndexError):
        weight_at(build_schedule(), t)


@pytest.mark.parametrize("args", [(0, 1e-3, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-3, 1.0)])
def test_invalid_arguments(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_tables_are_read_only():
    s = build_schedule(10)
    with pytest.raises(ValueError):
        s.betas[0] = 0.5


def test_config_round_trip():
    s = build_schedule(200, 2e-3, 0.03, k=2.0, gamma=1.0)
    r = NoiseSchedule.from_config(s.to_config())
    assert r.to_config() == s.to_config()
    np.testing.assert_array_equal(r.lambdas, s.lambdas)


def test_posterior_tables():
    s = build_schedule(50)
    ab_prev = np.concatenate([[1.0], s.alpha_bars[:-1]])
    np.testing.assert_allclose(s.posterior_variance, s.betas * (1 - ab_prev) / (1 - s.alpha_bars))
    assert s.posterior_variance[0] == 0.0
    assert np.isfinite(s.posterior_log_variance_clipped).all()


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(1, 400),
    lo=st.floats(1e-5, 0.05),
    span=st.floats(0.0, 0.4),
    k=st.floats(0.0, 10.0),
    gamma=st.floats(0.0, 2.0),
)
def test_schedule_invariants_property(n, lo, span, k, gamma):
    s = build_schedule(n, lo, min(lo + span, 0.5), k=k, gamma=gamma)
    np.testing.assert_allclose(s.alpha_bars, brute_alpha_bars(s.betas), rtol=1e-12)
    if n > 1:
        assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all(s.lambdas >= 0) and np.isfinite(s.lambdas).all()
