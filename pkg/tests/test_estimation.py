import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfiot import RadioConfig, compute_stats, generate_scenario
from cfiot.estimation import analytic_cross_cov, ap_estimator, draw_channel, draw_channels, estimate_cross_cov


@given(st.floats(1e-3, 1e3), st.floats(1e-14, 1e-6), st.integers(1, 8), st.integers(0, 10**6))
def test_single_thing_variance_closed_form(rho_p, beta, tau, seed):
    rng = np.random.default_rng(seed)
    psi = rng.standard_normal((tau, 1)) + 1j * rng.standard_normal((tau, 1))
    psi /= np.linalg.norm(psi)
    trp = tau * rho_p
    a = ap_estimator(psi, np.array([beta]), trp)[:, 0]
    gamma = np.sqrt(trp) * beta * np.vdot(psi[:, 0], a)
    assert abs(gamma.imag) <= 1e-9 * abs(gamma.real)
    expected = trp * beta**2 / (trp * beta + 1)
    assert gamma.real == pytest.approx(expected, rel=1e-10)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
def test_gamma_bounded_by_beta(K, tau, seed):
    scn = generate_scenario(5, K, 200.0, RadioConfig(tau=tau), rng=seed)
    stats = compute_stats(scn)
    assert np.all(stats.gamma >= 0)
    assert np.all(stats.gamma <= scn.beta)


def test_limits_of_pilot_power(small_scn):
    weak = compute_stats(small_scn.__class__(**{**small_scn.__dict__, "rho_p": 1e-12}))
    assert np.all(weak.gamma < 1e-10 * small_scn.beta + 1e-30)
    scn = generate_scenario(6, 3, 200.0, RadioConfig(tau=4, pilot_mode="orthogonal"), rng=1)
    strong = compute_stats(scn.__class__(**{**scn.__dict__, "rho_p": 1e20}))
    np.testing.assert_allclose(strong.gamma, scn.beta, rtol=1e-6)


def test_stored_and_recomputed_estimators_agree(small_scn):
    kept = compute_stats(small_scn, keep_a=True)
    lazy = compute_stats(small_scn, keep_a=False)
    assert lazy.a is None
    for m in range(small_scn.M):
        np.testing.assert_allclose(kept.estimator(m), lazy.estimator(m), rtol=1e-12)
    np.testing.assert_array_equal(kept.gamma, lazy.gamma)
    rng1, rng2 = np.random.default_rng(0), np.random.default_rng(0)
    np.testing.assert_allclose(
        draw_channels(small_scn, kept, 3, rng1)[1], draw_channels(small_scn, lazy, 3, rng2)[1], rtol=1e-12
    )


def test_estimate_is_linear_in_observation(small_scn, small_stats):
    d = draw_channel(small_scn, small_stats, np.random.default_rng(1))
    for m in range(small_scn.M):
        np.testing.assert_allclose(d.G_hat[m], small_stats.estimator(m).conj().T @ d.Y[m], rtol=1e-12)


def test_monte_carlo_variance_and_orthogonality(small_scn, small_stats):
    n = 10_000
    G, G_hat, _ = draw_channels(small_scn, small_stats, n, np.random.default_rng(2))
    var = np.mean(np.abs(G_hat) ** 2, axis=0)
    np.testing.assert_allclose(var, small_stats.gamma, rtol=0.05)
    err = G - G_hat
    prod = G_hat * err.conj()
    mean = prod.mean(axis=0)
    se = prod.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(mean.real) <= 3 * se + 1e-30) or np.mean(np.abs(mean) <= 3 * se) > 0.95


def test_noiseless_orthogonal_estimation_is_exact():
    scn = generate_scenario(4, 3, 200.0, RadioConfig(tau=3, pilot_mode="orthogonal"), rng=9)
    scn = scn.__class__(**{**scn.__dict__, "rho_p": 1e26})
    stats = compute_stats(scn)
    d = draw_channel(scn, stats, np.random.default_rng(0))
    np.testing.assert_allclose(d.G_hat, d.G, rtol=1e-4)


def test_cross_cov_diagonal_and_analytic(small_scn, small_stats):
    emp = estimate_cross_cov(small_scn, small_stats, 10_000, np.random.default_rng(3))
    np.testing.assert_allclose(np.diag(emp).real, small_stats.gamma.mean(axis=0), rtol=0.05)
    exact = analytic_cross_cov(small_scn, small_stats)
    np.testing.assert_allclose(np.diag(exact).real, small_stats.gamma.mean(axis=0), rtol=1e-10)
    off = ~np.eye(small_scn.K, dtype=bool)
    scale = np.abs(np.diag(exact)).max()
    assert np.max(np.abs(emp[off] - exact[off])) < 0.05 * scale


def test_cross_cov_vanishes_with_orthogonal_pilots():
    scn = generate_scenario(10, 4, 300.0, RadioConfig(tau=4, pilot_mode="orthogonal"), rng=4)
    stats = compute_stats(scn)
    exact = analytic_cross_cov(scn, stats)
    off = ~np.eye(4, dtype=bool)
    assert np.max(np.abs(exact[off])) < 1e-12 * np.abs(np.diag(exact)).max()
    emp = estimate_cross_cov(scn, stats, 2000, np.random.default_rng(0))
    assert np.max(np.abs(emp[off])) < 0.1 * np.abs(np.diag(emp)).max()


def test_cross_cov_needs_enough_draws(small_scn, small_stats):
    with pytest.raises(ValueError):
        estimate_cross_cov(small_scn, small_stats, 50, np.random.default_rng(0))


def test_contamination_identity(small_stats):
    # ||a||^2 + tau rho_p sum_j beta_mj |psi_j^H a_mk|^2 = a^H C a = gamma_mk
    lhs = small_stats.a_norm2 + small_stats.tau_rho_p * small_stats.contam
    np.testing.assert_allclose(lhs, small_stats.gamma, rtol=1e-9)
