import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfiot import RadioConfig, compute_stats, draw_channel, draw_channels, generate_scenario
from cfiot.estimation import ChannelDraw
from cfiot.ul_perf import UlPowerAllocation, exact_mmse_sinr, rm_fixed_point, rm_sinr
from cfiot.ul_power import maxmin_exact, maxmin_rm, target_rate_rm, ul_energy_efficiency


def _instance(M, K, tau, seed, D=300.0):
    scn = generate_scenario(M, K, D, RadioConfig(tau=tau), rng=seed)
    return scn, compute_stats(scn)


def _symmetric(M, K):
    # Every thing sees identical large-scale statistics and an identical estimate.
    scn = generate_scenario(M, K, 200.0, RadioConfig(tau=K, pilot_mode="orthogonal"), rng=0)
    beta = np.repeat(scn.beta[:, :1], K, axis=1)
    scn = scn.__class__(**{**scn.__dict__, "beta": beta})
    return scn, compute_stats(scn)


def _rm(stats, eta, rho_u):
    a = UlPowerAllocation(eta)
    return rm_sinr(rm_fixed_point(stats, a, rho_u, tol=1e-12), stats, a, rho_u)


def test_symmetric_instance_gives_full_power():
    scn, stats = _symmetric(8, 3)
    g = np.random.default_rng(0).standard_normal((8, 1)) + 1j * np.random.default_rng(1).standard_normal((8, 1))
    G_hat = np.repeat(g * np.sqrt(stats.gamma[:, :1] / 2), 3, axis=1)
    for method in ("direct", "sinr"):
        res = maxmin_exact(G_hat, stats, rho_u=scn.rho_u, method=method)
        np.testing.assert_allclose(res.eta, 1.0, rtol=1e-9)
    np.testing.assert_allclose(maxmin_rm(stats, rho_u=scn.rho_u).eta, 1.0, rtol=1e-9)


@pytest.mark.parametrize("method", ["direct", "sinr"])
def test_maxmin_exact_equalizes(method):
    scn, stats = _instance(16, 4, 4, 3)
    draw = draw_channel(scn, stats, np.random.default_rng(3))
    u = np.array([0.5, 0.5, 1.0, 0.25])
    res = maxmin_exact(draw, stats, u=u, rho_u=scn.rho_u, eps=1e-10, max_iter=200_000, method=method)
    assert res.converged
    assert np.max(res.eta) == pytest.approx(1.0)
    assert np.all((res.eta > 0) & (res.eta <= 1))
    s = exact_mmse_sinr(draw, stats, UlPowerAllocation(res.eta), scn.rho_u)
    ratio = s / (1 + s) / u
    assert (ratio.max() - ratio.min()) / ratio.min() < 1e-6


def test_exact_methods_agree():
    scn, stats = _instance(12, 3, 3, 4, D=600.0)
    draw = draw_channel(scn, stats, np.random.default_rng(4))
    a = maxmin_exact(draw, stats, rho_u=scn.rho_u, eps=1e-11, max_iter=500_000, method="direct")
    b = maxmin_exact(draw, stats, rho_u=scn.rho_u, eps=1e-11, method="sinr")
    np.testing.assert_allclose(a.eta, b.eta, rtol=1e-5)
    with pytest.raises(ValueError):
        maxmin_exact(draw, stats, rho_u=scn.rho_u, method="fast")


def test_maxmin_exact_beats_random_search():
    scn, stats = _instance(2, 2, 1, 5, D=100.0)
    rng = np.random.default_rng(5)
    draw = draw_channel(scn, stats, rng)
    u = np.full(2, 1 / np.sqrt(2))
    res = maxmin_exact(draw, stats, rho_u=scn.rho_u, eps=1e-10, max_iter=100_000, method="sinr")
    best = np.min(exact_mmse_sinr(draw, stats, UlPowerAllocation(res.eta), scn.rho_u) / u)
    for _ in range(200):
        eta = rng.uniform(0, 1, 2)
        s = exact_mmse_sinr(draw, stats, UlPowerAllocation(eta), scn.rho_u)
        assert np.min(s / u) <= best * (1 + 1e-6)


@given(st.integers(0, 10**5))
def test_maxmin_rm_equalizes_weighted_sinr(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 8))
    scn, stats = _instance(int(rng.integers(K, 40)), K, int(rng.integers(1, K + 1)), seed)
    u = rng.uniform(0.2, 1.0, K)
    res = maxmin_rm(stats, u=u, rho_u=scn.rho_u, eps=1e-10)
    assert res.converged
    assert np.max(res.eta) == pytest.approx(1.0)
    w = _rm(stats, res.eta, scn.rho_u) / u
    assert (w.max() - w.min()) / w.min() < 1e-6


def test_maxmin_permutation_equivariance():
    scn, stats = _instance(20, 5, 3, 6)
    perm = np.array([4, 2, 0, 1, 3])
    pscn = scn.__class__(**{**scn.__dict__, "beta": scn.beta[:, perm], "pilots": scn.pilots[:, perm]})
    pstats = compute_stats(pscn)
    np.testing.assert_allclose(
        maxmin_rm(pstats, rho_u=scn.rho_u).eta, maxmin_rm(stats, rho_u=scn.rho_u).eta[perm], rtol=1e-8
    )
    draw = draw_channel(scn, stats, np.random.default_rng(6))
    pdraw = ChannelDraw(G=draw.G[:, perm], G_hat=draw.G_hat[:, perm], Y=draw.Y)
    a = maxmin_exact(draw, stats, rho_u=scn.rho_u, method="sinr").eta
    b = maxmin_exact(pdraw, pstats, rho_u=scn.rho_u, method="sinr").eta
    np.testing.assert_allclose(b, a[perm], rtol=1e-6)


def test_rm_and_exact_control_agree_on_low_percentile():
    scn, stats = _instance(128, 16, 16, 7, D=1000.0)
    _, G_hat, _ = draw_channels(scn, stats, 40, np.random.default_rng(7))
    eta_rm = maxmin_rm(stats, rho_u=scn.rho_u).eta
    r_exact, r_rm = [], []
    for g in G_hat:
        e1 = maxmin_exact(g, stats, rho_u=scn.rho_u, method="sinr").eta
        r_exact.append(np.log2(1 + exact_mmse_sinr(g, stats, UlPowerAllocation(e1), scn.rho_u)))
        r_rm.append(np.log2(1 + exact_mmse_sinr(g, stats, UlPowerAllocation(eta_rm), scn.rho_u)))
    p_exact = np.percentile(np.mean(r_exact, axis=0), 5)
    p_rm = np.percentile(np.mean(r_rm, axis=0), 5)
    assert abs(p_rm - p_exact) / p_exact <= 0.10


def test_target_rate_phase1_hits_target():
    scn, stats = _instance(64, 8, 8, 8)
    full = _rm(stats, np.ones(8), scn.rho_u)
    S_t = 0.2 * full.min()
    res = target_rate_rm(stats, rho_u=scn.rho_u, S_t=S_t, eps=1e-12)
    assert res.phase == 1 and res.converged
    assert np.all(res.eta < 1) and res.good_mask.all()
    np.testing.assert_allclose(_rm(stats, res.eta, scn.rho_u), S_t, rtol=1e-6)


def test_target_rate_vanishing_target():
    scn, stats = _instance(32, 4, 4, 9)
    res = target_rate_rm(stats, rho_u=scn.rho_u, S_t=1e-9)
    assert np.all(res.eta < 1e-6)


def test_target_rate_marks_starved_thing_poor():
    scn, stats = _instance(64, 6, 6, 10)
    beta = scn.beta.copy()
    beta[:, 2] *= 1e-6
    scn = scn.__class__(**{**scn.__dict__, "beta": beta})
    stats = compute_stats(scn)
    full = _rm(stats, np.ones(6), scn.rho_u)
    S_t = float(np.median(full))
    res = target_rate_rm(stats, rho_u=scn.rho_u, S_t=S_t)
    assert res.phase == 2
    assert not res.good_mask[2]
    assert np.all((res.eta >= 0) & (res.eta <= 1))
    with pytest.raises(ValueError):
        target_rate_rm(stats, rho_u=scn.rho_u, S_t=0.0)
    with pytest.raises(ValueError):
        target_rate_rm(stats, rho_u=scn.rho_u, S_t=1.0, u_g=0.1, u_p=1.0)


def test_energy_efficiency_examples():
    rates = np.array([1.0, 2.0, 3.0])
    assert ul_energy_efficiency(rates, np.ones(3), 20.0) == pytest.approx(6.0 / 60.0)
    eta = np.array([0.2, 0.6, 1.0])
    assert ul_energy_efficiency(rates, eta / 2, 20.0) == pytest.approx(2 * ul_energy_efficiency(rates, eta, 20.0))
    with pytest.raises(ValueError):
        ul_energy_efficiency(rates, np.zeros(3), 20.0)
