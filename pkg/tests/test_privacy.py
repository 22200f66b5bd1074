import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from fedcf.client_stats import Estimator, client_cg_comm_efficient, client_cg_private, client_prior_message
from fedcf.domain import FairnessSpec
from fedcf.privacy import (
    DpConfig,
    Mechanism,
    Protocol,
    add_noise,
    aggregated_variance,
    client_rng,
    exponential_scale,
    gaussian_sigma,
    normal_cdf,
    pac_accept,
    sensitivity,
)
from fedcf.server_agg import aggregate_priors

from conftest import random_dataset


def test_sensitivity_examples():
    assert sensitivity(Protocol.ENHANCED_PRIVACY, 10, 0.5, 0.5) == pytest.approx(0.4)
    assert sensitivity(Protocol.COMM_EFFICIENT, 10, 0.5, 0.8, "upper") == pytest.approx(0.2)
    assert sensitivity(Protocol.COMM_EFFICIENT, 10, 0.5, 0.8, "lower") == pytest.approx(0.125)
    assert sensitivity(Protocol.ENHANCED_PRIVACY, 10**9, 0.5, 0.5) < 1e-8
    with pytest.raises(ValueError):
        sensitivity(Protocol.COMM_EFFICIENT, 10, 0.0, 0.5)


def test_gaussian_sigma_examples():
    s = gaussian_sigma(1.0, 1.0, 0.05)
    assert s * s == pytest.approx(2 * math.log(25), abs=1e-12)
    assert s == pytest.approx(2.5373, abs=1e-4)
    assert gaussian_sigma(0.0, 1.0, 0.05) == 0.0
    assert gaussian_sigma(1.0, 2.0, 0.05) == pytest.approx(s / 2, abs=1e-15)
    with pytest.raises(ValueError):
        gaussian_sigma(1.0, 0.0, 0.05)
    with pytest.raises(ValueError):
        gaussian_sigma(1.0, 1.0, 1.3)


@given(st.floats(0, 10), st.floats(0.01, 10), st.floats(1e-9, 1.2))
def test_gaussian_sigma_closed_form(dh, eps, delta):
    assert abs(gaussian_sigma(dh, eps, delta) - dh * math.sqrt(2 * math.log(1.25 / delta)) / eps) <= 1e-12 * max(1, dh / eps)


def test_aggregated_variance_examples():
    assert aggregated_variance([0.4, 0.6], [1, 1]) == pytest.approx(0.52, abs=1e-15)
    assert aggregated_variance([0.4, 0.6], [0, 0]) == 0
    assert aggregated_variance([1.0], [0.3]) == pytest.approx(0.09)


def test_pac_examples():
    assert pac_accept(0.1, 0.1, 0.01, 0.4)
    assert not pac_accept(0.1, 0.1, 0.01, 0.6)
    assert pac_accept(0.05, 0.1, 0.0, 0.95)
    assert not pac_accept(0.15, 0.1, 0.0, 0.95)


@given(st.floats(0, 1), st.floats(1e-8, 1), st.floats(0.01, 0.99))
def test_pac_monotone_in_c(cg, var, beta):
    grid = np.linspace(0.0, 1.0, 101)
    decisions = [pac_accept(cg, c, var, beta) for c in grid]
    assert all(b >= a for a, b in zip(decisions, decisions[1:]))


def test_normal_cdf():
    assert normal_cdf(0.0) == 0.5
    assert normal_cdf(1.96) == pytest.approx(0.9750, abs=1e-4)
    for x in np.linspace(-6, 6, 121):
        assert abs(normal_cdf(-x) - (1 - normal_cdf(x))) <= 1e-9
        assert abs(normal_cdf(x) - norm.cdf(x)) <= 1.5e-7


def _setup(seed=0):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, 0, 120)
    scores = rng.random((120, 3))
    spec = FairnessSpec("dp", (0, 1), (0,), 0.1)
    priors = aggregate_priors({0: client_prior_message(ds, spec)}, spec.groups, spec.positive_labels)
    ce = client_cg_comm_efficient(ds, scores, spec, 0.5, 0)
    ep = client_cg_private(ds, scores, spec, 0.5, 0, priors)
    return ce, ep, priors


def test_no_mechanism_is_identity():
    ce, ep, priors = _setup()
    dp = DpConfig(Mechanism.NONE)
    assert add_noise(ce, dp, priors, client_rng(0, 0, 0, 0)) is ce
    assert add_noise(ep, dp, priors, client_rng(0, 0, 0, 0)) is ep


def test_exponential_noise_pushes_gap_up():
    ce, ep, priors = _setup()
    dp = DpConfig(Mechanism.EXPONENTIAL, epsilon=0.5, seed=1)
    for r in range(50):
        noisy_ce = add_noise(ce, dp, priors, client_rng(1, 0, r, 0))
        noisy_ep = add_noise(ep, dp, priors, client_rng(1, 0, r, 0))
        assert np.all(noisy_ce.u > ce.u) and np.all(noisy_ce.l < ce.l)
        assert np.all(noisy_ep.pw > ep.pw)


def test_gaussian_reproducible_and_scaled():
    ce, ep, priors = _setup()
    dp = DpConfig(Mechanism.GAUSSIAN, epsilon=1.0, delta=1e-5, seed=3)
    a = add_noise(ce, dp, priors, client_rng(3, 0, 7, 0))
    b = add_noise(ce, dp, priors, client_rng(3, 0, 7, 0))
    assert np.array_equal(a.u, b.u) and np.array_equal(a.l, b.l)
    c = add_noise(ce, dp, priors, client_rng(3, 0, 8, 0))
    assert not np.array_equal(a.u, c.u)
    expected = gaussian_sigma(sensitivity(Protocol.COMM_EFFICIENT, ce.n_k, priors.lower_of(0, 0), priors.upper_of(0, 0), "upper"), 1.0, 1e-5)
    assert a.sigma_u[0] == pytest.approx(expected, abs=1e-15)
    e = add_noise(ep, dp, priors, client_rng(3, 0, 7, 0))
    dh = sensitivity(Protocol.ENHANCED_PRIVACY, ep.n_k, priors.lower_of(0, 0), priors.upper_of(0, 0))
    assert e.sigma[0, 0] == pytest.approx(gaussian_sigma(dh, 1.0, 1e-5), abs=1e-15)


def test_exponential_scale():
    assert exponential_scale(0.3, 2.0) == pytest.approx(0.3)
    draws = np.random.default_rng(0).exponential(1.0, 200_000) * exponential_scale(0.3, 2.0)
    assert draws.mean() == pytest.approx(0.3, rel=0.01)


def test_gaussian_noise_empirical_std():
    ce, _, priors = _setup()
    dp = DpConfig(Mechanism.GAUSSIAN, epsilon=1.0, delta=1e-5)
    draws = np.array([add_noise(ce, dp, priors, client_rng(0, 0, r, 0)).u[0] for r in range(4000)])
    sigma = add_noise(ce, dp, priors, client_rng(0, 0, 0, 0)).sigma_u[0] * priors.lower_of(0, 0)
    assert np.std(draws) == pytest.approx(sigma, rel=0.05)
    assert np.mean(draws) == pytest.approx(ce.u[0], abs=4 * sigma / math.sqrt(4000))


def test_dp_config_validation():
    with pytest.raises(ValueError):
        DpConfig(Mechanism.GAUSSIAN, epsilon=-1)
    with pytest.raises(ValueError):
        DpConfig(Mechanism.GAUSSIAN, delta=1.0)
    assert not DpConfig().enabled
