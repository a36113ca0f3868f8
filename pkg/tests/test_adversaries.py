import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from adalab.adversaries import (AdversaryConfig, AssumptionViolationError, SignEstimate,
                                bayes_sign_batch, bayes_sign_classify, bayes_sign_quadrature,
                                estimate_signs, least_favorable_covariance, select_bayes_final,
                                select_k_step_greedy, select_one_step, select_query, sign_loglr)
from adalab.core import GameHistory, QuerySpec, augmented_min_eigenvalue
from adalab.harness import ExperimentConfig, run_game
from adalab.mechanisms import MechanismConfig, NoiseSpec, default_schedule

from oracles import e_x_sign_x_plus_z, ellipsoid_max


def test_least_favorable_zero_x():
    v, value = least_favorable_covariance(np.zeros(2), np.eye(2), 1.0)
    assert value == 0.0 and np.all(v == 0.0)


def test_least_favorable_identity_example():
    v, value = least_favorable_covariance(np.array([1.0, 0.0]), np.eye(2), 1.0)
    np.testing.assert_allclose(v, [1.0, 0.0])
    assert value == pytest.approx(1.0)
    v_grid, best = ellipsoid_max(np.array([1.0, 0.0]), np.eye(2), 1.0)
    assert best == pytest.approx(value, abs=1e-6)
    np.testing.assert_allclose(v_grid, v, atol=2e-3)


def test_least_favorable_diagonal_example():
    S = np.diag([1.0, 4.0])
    x = np.array([1.0, 1.0])
    v, value = least_favorable_covariance(x, S, 1.0)
    assert value == pytest.approx(math.sqrt(5))
    _, best = ellipsoid_max(x, S, 1.0)
    assert best == pytest.approx(value, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 3.0))
def test_least_favorable_is_feasible_and_optimal(seed, sigma):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(2, 2))
    S = G @ G.T + 0.05 * np.eye(2)
    x = rng.normal(size=2)
    v, value = least_favorable_covariance(x, S, sigma)
    assert v @ np.linalg.solve(S, v) == pytest.approx(sigma**2, rel=1e-9)
    assert augmented_min_eigenvalue(S, QuerySpec(0.0, sigma**2, v)) >= -1e-8
    _, best = ellipsoid_max(x, S, sigma, resolution=1e-3)
    assert best <= value + 1e-9
    assert best == pytest.approx(value, rel=1e-5)


def _history(releases, noise, cov=None):
    h = GameHistory()
    n = len(releases)
    cov = np.eye(n) if cov is None else cov
    for i, a in enumerate(releases):
        h = h.append(QuerySpec(0.0, cov[i, i], cov[i, :i]), a, noise, 0.0, a)
    return h


def test_one_step_empty_and_zero_residual():
    q = select_one_step(GameHistory().shared, 2.0)
    assert q.variance == 4.0 and q.cov_with_history.size == 0
    q = select_one_step(_history([0.0, 0.0], NoiseSpec.gaussian(1.0)).shared, 1.0)
    np.testing.assert_array_equal(q.cov_with_history, [0.0, 0.0])


def test_one_step_two_round_example():
    h = _history([2.0], NoiseSpec.gaussian(1.0))
    q = select_one_step(h.shared, 1.0)
    np.testing.assert_allclose(q.cov_with_history, [1.0])
    bias = q.cov_with_history[0] / (1.0 + 1.0) * 2.0
    assert bias == pytest.approx(1.0)
    # Monte Carlo of the constructed joint law: phi2 = phi1, A1 = phi1 + Z.
    rng = np.random.default_rng(0)
    phi1 = rng.standard_normal(10**6)
    a1 = phi1 + rng.standard_normal(10**6)
    slope = np.polyfit(a1, phi1, 1)[0]
    resid = phi1 - slope * a1
    se = resid.std() / (a1.std() * math.sqrt(a1.size))
    assert abs(slope * 2.0 - bias) < 4 * 2.0 * se


def test_greedy_first_round_and_zero_residuals():
    q = select_k_step_greedy(GameHistory().shared, 1.5)
    assert q.variance == 2.25 and q.cov_with_history.size == 0
    h = GameHistory()
    for _ in range(4):
        q = select_k_step_greedy(h.shared, 1.0)
        h = h.append(q, 0.0, NoiseSpec.gaussian(1.0), 0.0, 0.0)
    np.testing.assert_array_equal(h.shared.covariance(), np.eye(4))


def test_classify_examples():
    assert bayes_sign_classify(0.5, 0.0, NoiseSpec.gaussian(1.0), 1.0) == 1
    assert bayes_sign_classify(1.0, 1.0, NoiseSpec.gaussian(1.0), 1.0) == 1
    assert bayes_sign_classify(-0.3, 0.0, NoiseSpec.point_mass(), 1.0) == -1
    with pytest.raises(ValueError):
        bayes_sign_classify(float("nan"), 0.0, NoiseSpec.gaussian(1.0), 1.0)


def _quad_loglr(r, density, sigma):
    f = lambda x: density(r - x) * stats.norm.pdf(x, scale=sigma)  # noqa: E731
    opts = dict(limit=200, epsabs=0.0, epsrel=1e-11)
    pos = integrate.quad(f, 0, 12 * sigma, points=[min(max(r, 0), 12 * sigma)], **opts)[0]
    neg = integrate.quad(f, -12 * sigma, 0, points=[min(max(r, -12 * sigma), 0)], **opts)[0]
    return math.log(pos / neg)


@settings(max_examples=30, deadline=None)
@given(st.floats(-4, 4), st.floats(0.3, 3))
def test_gaussian_loglr_matches_quadrature(r, w):
    got = float(sign_loglr(np.array(r), NoiseSpec.gaussian(w), 1.0))
    want = _quad_loglr(r, lambda z: stats.norm.pdf(z, scale=w), 1.0)
    assert got == pytest.approx(want, abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.floats(-4, 4), st.floats(0.3, 2))
def test_uniform_loglr_matches_quadrature(r, w):
    a = math.sqrt(3) * w
    density = lambda z: np.where(np.abs(z) <= a, 0.5 / a, 0.0)  # noqa: E731
    got = float(sign_loglr(np.array(r), NoiseSpec.uniform(w), 1.0))
    opts = dict(epsabs=0.0, epsrel=1e-11)
    pos = integrate.quad(stats.norm.pdf, max(0, r - a), max(0, r + a), **opts)[0]
    neg = integrate.quad(stats.norm.pdf, min(0, r - a), min(0, r + a), **opts)[0]
    if pos == 0 or neg == 0:
        assert got == (math.inf if neg == 0 else -math.inf)
    else:
        assert got == pytest.approx(math.log(pos / neg), abs=1e-6)
    # Panel quadrature resolves the jumps of a uniform density only to panel
    # accuracy, which can flip the sign of a near-zero residual.
    if abs(r) >= 0.05:
        assert bayes_sign_quadrature(r, density, 1.0) == (1 if r >= 0 else -1)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3).filter(lambda r: abs(r) > 1e-6))
def test_quadrature_classifier_matches_closed_form(r):
    density = lambda z: stats.norm.pdf(z, scale=0.8)  # noqa: E731
    assert bayes_sign_quadrature(r, density, 1.0) == bayes_sign_classify(
        r, 0.0, NoiseSpec.gaussian(0.8), 1.0)


def test_tie_resolves_to_plus_one():
    out = bayes_sign_batch(np.zeros(3), NoiseSpec.gaussian([1.0, 0.0, 2.0]), 1.0)
    np.testing.assert_array_equal(out, [1, 1, 1])


def test_sign_estimate_validation():
    with pytest.raises(ValueError):
        SignEstimate(np.array([1.0, 0.0]), np.zeros(2))


def test_bayes_margin_with_gaussian_noise():
    # k = 10, w**2 = 3: E[s_hat X] = sqrt(2/pi) sigma**2 / sqrt(sigma**2 + w**2).
    w = math.sqrt(3)
    want = e_x_sign_x_plus_z(1.0, w)
    assert want == pytest.approx(math.sqrt(2 / math.pi) / 2, rel=1e-8)
    rng = np.random.default_rng(7)
    x = rng.standard_normal(10**6)
    s = bayes_sign_batch(x + w * rng.standard_normal(x.size), NoiseSpec.gaussian(w), 1.0)
    v = s * x
    assert abs(v.mean() - want) < 4 * v.std() / math.sqrt(v.size)


def test_bayes_final_with_exact_signs():
    phi = np.array([0.4, -1.2, 0.7, -0.1])
    h = _history(phi, NoiseSpec.point_mass())
    est = estimate_signs(h.shared, 1.0)
    np.testing.assert_array_equal(est.signs, np.sign(phi))
    q = select_bayes_final(h.shared, 1.0, 0.0)
    assert q.mean == 0.0 and q.variance == 1.0
    bias = q.cov_with_history @ phi
    assert bias == pytest.approx(np.abs(phi).sum() / 2.0)
    flipped = select_bayes_final(h.shared, 1.0, -0.5)
    np.testing.assert_array_equal(flipped.cov_with_history, -q.cov_with_history)
    assert augmented_min_eigenvalue(np.eye(4), q) >= -1e-12


def test_bayes_final_two_rounds_and_assumption_check():
    q = select_bayes_final(_history([-0.7], NoiseSpec.gaussian(1.0), cov=4 * np.eye(1)).shared, 2.0)
    np.testing.assert_allclose(q.cov_with_history, [-4.0])
    bad = _history([0.1, 0.2], NoiseSpec.gaussian(1.0), cov=np.array([[1.0, 0.5], [0.5, 1.0]]))
    with pytest.raises(AssumptionViolationError):
        select_bayes_final(bad.shared, 1.0)


def test_adversary_config_round_trip_and_validation():
    cfg = AdversaryConfig("fixed_sequence", 1.0, (QuerySpec(0.0, 1.0), QuerySpec(0.0, 1.0, [0.2])))
    assert AdversaryConfig(**{**cfg.to_dict(), "queries": cfg.queries}) == cfg
    with pytest.raises(ValueError):
        AdversaryConfig("clever")
    with pytest.raises(ValueError):
        AdversaryConfig("bayes_sign", sigma=0.0)
    with pytest.raises(ValueError):
        AdversaryConfig("fixed_sequence")


def _replay(config, games):
    """Check that recorded queries are what each rule picks from the shared prefix."""
    for g in range(games):
        h = run_game(config, g)
        shared = h.shared
        for i, rnd in enumerate(shared.rounds):
            prefix = type(shared)(shared.rounds[:i])
            declared = config.mechanism.declare(i)
            q = select_query(config.adversary, prefix, config.k, declared)
            assert q.variance == pytest.approx(rnd.query.variance, rel=1e-12)
            np.testing.assert_allclose(q.cov_with_history, rnd.query.cov_with_history,
                                       atol=1e-7, rtol=1e-6)
            assert augmented_min_eigenvalue(prefix.covariance(), rnd.query) >= -1e-8


@pytest.mark.parametrize("kind", ["k_step_greedy", "orthogonal_then_one_step", "bayes_sign"])
def test_harness_matches_reference_rules(kind):
    k = 6
    config = ExperimentConfig(k, 1.0, default_schedule(k, 1.0), AdversaryConfig(kind, 1.0),
                              replications=1, seed=3)
    _replay(config, 20)


def test_greedy_replay_with_uniform_noise():
    k = 5
    mech = MechanismConfig("uniform_schedule", (1.0,) * k)
    config = ExperimentConfig(k, 1.0, mech, AdversaryConfig("k_step_greedy", 1.0),
                              replications=1, seed=9)
    _replay(config, 10)
