"""Uplink power control: max-min (exact and random-matrix SINR), target rate,
and uplink energy efficiency."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .estimation import ChannelDraw, EstimationStats
from .ul_perf import UlPowerAllocation, rm_fixed_point, rm_sinr

__all__ = [
    "MaxMinResult",
    "TargetRateResult",
    "maxmin_exact",
    "maxmin_rm",
    "target_rate_rm",
    "ul_energy_efficiency",
    "default_weights",
]


def default_weights(K: int, u=None, nu=None) -> tuple[np.ndarray, np.ndarray]:
    u = np.full(K, 1.0 / np.sqrt(K)) if u is None else np.asarray(u, dtype=float)
    nu = np.ones(K) if nu is None else np.asarray(nu, dtype=float)
    return u, nu


@dataclass(frozen=True)
class MaxMinResult:
    """Output of a max-min solver.

    ``d`` holds the per-thing ``d_k`` of the exact algorithm, ``T_diag`` the
    diagonal of ``T`` for the random-matrix one.
    """

    eta: np.ndarray
    iterations: int
    converged: bool
    d: np.ndarray | None = None
    T_diag: np.ndarray | None = None
    deltas: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)


def _quad_forms(G_hat: np.ndarray, weights: np.ndarray, err_diag: np.ndarray) -> np.ndarray:
    # ghat_k^H (sum_k w_k J_k + I)^{-1} ghat_k, J_k = ghat_k ghat_k^H + B_k - Gamma_k
    A = (G_hat * weights[None, :]) @ G_hat.conj().T
    A[np.diag_indices_from(A)] += err_diag @ weights + 1.0
    X = cho_solve(cho_factor(A, lower=True), G_hat)
    return np.real(np.sum(G_hat.conj() * X, axis=0))


def maxmin_exact(
    draw: ChannelDraw | np.ndarray,
    stats: EstimationStats,
    u=None,
    nu=None,
    rho_u: float = 1.0,
    eps: float = 1e-6,
    max_iter: int = 1000,
    method: str = "direct",
) -> MaxMinResult:
    """Max-min weighted power control on the exact MMSE SINR of one draw.

    Iterates ``d_k <- rho'_k ghat_k^H (alpha sum_k' rho'_k' u_k' / d_k' J_k' + I)^{-1} ghat_k``
    with ``alpha = min_k d_k / u_k`` and returns ``eta_k = alpha u_k / d_k``.
    The stopping test is relative: ``|d_k^(n+1) - d_k^(n)| <= eps d_k^(n+1)``.
    At the output ``q_k / u_k`` is the same for every thing, where
    ``q_k = SINR_k / (1 + SINR_k)``.

    The d-iteration contracts at a rate of roughly ``1 - 1/SINR`` and needs
    thousands of steps once SINRs reach the hundreds. ``method="sinr"``
    reaches the same fixed point by solving each thing's own-power equation
    in closed form at every step.
    """
    G_hat = draw.G_hat if isinstance(draw, ChannelDraw) else np.asarray(draw)
    K = G_hat.shape[1]
    u, nu = default_weights(K, u, nu)
    if np.any(u <= 0):
        raise ValueError("rate weights must be positive")
    rho_w = rho_u * nu
    err = stats.beta - stats.gamma
    if method == "sinr":
        return _maxmin_exact_sinr(G_hat, u, rho_w, err, eps, max_iter)
    if method != "direct":
        raise ValueError(f"unknown method {method!r}")

    d = rho_w * _quad_forms(G_hat, rho_w, err)
    deltas = []
    converged = False
    n = 0
    for n in range(1, max_iter + 1):
        alpha = np.min(d / u)
        d_new = rho_w * _quad_forms(G_hat, alpha * rho_w * u / d, err)
        diff = np.abs(d_new - d)
        deltas.append(diff.max())
        d = d_new
        if np.all(diff <= eps * d_new):
            converged = True
            break
    ratio = d / u
    eta = ratio.min() / ratio
    return MaxMinResult(eta=eta, iterations=n, converged=converged, d=d, deltas=np.array(deltas))


def _maxmin_exact_sinr(G_hat, u, rho_w, err, eps, max_iter):
    # Same fixed point as the d-iteration. With c_k = d_k / (1 - eta_k d_k)
    # (SINR per unit power, independent of eta_k), q_k = eta_k c_k / (1 + eta_k c_k)
    # is solved for eta_k directly, which stays fast when q_k is close to 1.
    eta = np.ones(len(u))
    deltas = []
    converged = False
    n = 0
    for n in range(1, max_iter + 1):
        d = rho_w * _quad_forms(G_hat, rho_w * eta, err)
        c = d / (1.0 - eta * d)
        alpha = np.min(c / (u * (1.0 + c)))
        eta_new = alpha * u / (c * (1.0 - alpha * u))
        diff = np.abs(eta_new - eta)
        deltas.append(diff.max())
        eta = eta_new
        if np.all(diff <= eps * eta_new):
            converged = True
            break
    d = rho_w * _quad_forms(G_hat, rho_w * eta, err)
    return MaxMinResult(eta=eta, iterations=n, converged=converged, d=d, deltas=np.array(deltas))


def _initial_T(stats: EstimationStats, nu: np.ndarray, rho_u: float) -> np.ndarray:
    state = rm_fixed_point(stats, UlPowerAllocation(np.ones(stats.K), nu=nu), rho_u)
    return state.T_diag


def _T_update(stats: EstimationStats, T: np.ndarray, scale: np.ndarray, xi: np.ndarray) -> np.ndarray:
    # T <- M (sum_k p_k (B_k - xi_k/(1+xi_k) Gamma_k) + I)^{-1}, p_k = scale_k / tr(Gamma_k T)
    M = stats.M
    w = scale / (T @ stats.gamma)
    inner = stats.beta @ w - stats.gamma @ (w * xi / (1.0 + xi))
    return M / (inner + 1.0)


def maxmin_rm(
    stats: EstimationStats,
    u=None,
    nu=None,
    rho_u: float = 1.0,
    eps: float = 1e-6,
    max_iter: int = 1000,
) -> MaxMinResult:
    """Max-min weighted power control on the random-matrix SINR.

    Only large-scale statistics are used. The diagonal ``T`` is iterated with
    ``alpha = min_k nu_k tr(Gamma_k T) / u_k`` and ``xi_k = rho_u alpha u_k / M``
    until ``max_m |T^(n+1) - T^(n)| / T^(n+1) <= eps``.
    """
    K, M = stats.K, stats.M
    u, nu = default_weights(K, u, nu)
    if np.any(u <= 0):
        raise ValueError("rate weights must be positive")
    T = _initial_T(stats, nu, rho_u)
    deltas = []
    converged = False
    n = 0
    for n in range(1, max_iter + 1):
        alpha = np.min(nu * (T @ stats.gamma) / u)
        xi = rho_u * alpha * u / M
        T_new = _T_update(stats, T, alpha * rho_u * u, xi)
        diff = np.abs(T_new - T)
        deltas.append(np.max(diff / T_new))
        T = T_new
        if np.all(diff <= eps * T_new):
            converged = True
            break
    ratio = nu * (T @ stats.gamma) / u
    eta = ratio.min() / ratio
    return MaxMinResult(eta=eta, iterations=n, converged=converged, T_diag=T, deltas=np.array(deltas))


@dataclass(frozen=True)
class TargetRateResult:
    """Output of target-rate power control.

    ``good_mask[k]`` is False for things classified as poor; ``unmet`` lists
    things whose coefficient had to be clamped to 1 after the second phase.
    ``converged`` refers to the phase that produced ``eta``; a first phase
    that fails to settle counts as an infeasible target.
    """

    eta: np.ndarray
    good_mask: np.ndarray
    phase: int
    iterations: int
    converged: bool
    unmet: np.ndarray
    T_diag: np.ndarray


def _iterate_T(stats, T, scale, xi, eps, max_iter):
    for n in range(1, max_iter + 1):
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            T_new = _T_update(stats, T, scale, xi)
        if not np.all(np.isfinite(T_new) & (T_new > 0)):
            # Infeasible targets drive T to zero.
            return T, n, False
        done = np.all(np.abs(T_new - T) <= eps * T_new)
        T = T_new
        if done:
            return T, n, True
    return T, max_iter, False


def target_rate_rm(
    stats: EstimationStats,
    nu=None,
    rho_u: float = 1.0,
    S_t: float = 1.0,
    u_g: float = 1.0,
    u_p: float = 0.1,
    eps: float = 1e-6,
    max_iter: int = 1000,
    full_power_sinr=None,
) -> TargetRateResult:
    """Target-SINR power control on the random-matrix SINR.

    Phase 1 solves for powers giving every thing SINR ``S_t``. If any
    coefficient leaves [0, 1], things are split into good and poor by their
    full-power SINR (random-matrix by default, or ``full_power_sinr`` when
    given), poor things get the weight ``u_p`` and phase 2 targets
    ``S_t u_k / u_g``. Coefficients still above 1 are clamped and reported.
    """
    K, M = stats.K, stats.M
    if S_t <= 0:
        raise ValueError("target SINR must be positive")
    if not 0 < u_p <= u_g:
        raise ValueError("need 0 < u_p <= u_g")
    _, nu = default_weights(K, None, nu)
    T0 = _initial_T(stats, nu, rho_u)

    alpha = S_t * M / rho_u
    xi = np.full(K, S_t)
    T, it1, conv1 = _iterate_T(stats, T0, np.full(K, alpha * rho_u), xi, eps, max_iter)
    eta = alpha / (nu * (T @ stats.gamma))
    if conv1 and np.all((eta >= 0) & (eta <= 1)):
        return TargetRateResult(
            eta=eta,
            good_mask=np.ones(K, dtype=bool),
            phase=1,
            iterations=it1,
            converged=conv1,
            unmet=np.empty(0, dtype=int),
            T_diag=T,
        )

    if full_power_sinr is None:
        full = UlPowerAllocation(np.ones(K), nu=nu)
        state = rm_fixed_point(stats, full, rho_u)
        full_power_sinr = rm_sinr(state, stats, full, rho_u)
    good = np.asarray(full_power_sinr) >= S_t
    u = np.where(good, u_g, u_p)
    alpha = alpha / u_g
    xi = S_t * u / u_g
    T, it2, conv2 = _iterate_T(stats, T0, alpha * rho_u * u, xi, eps, max_iter)
    eta = alpha * u / (nu * (T @ stats.gamma))
    unmet = np.flatnonzero(eta > 1.0)
    return TargetRateResult(
        eta=np.clip(eta, 0.0, 1.0),
        good_mask=good,
        phase=2,
        iterations=it1 + it2,
        converged=conv2,
        unmet=unmet,
        T_diag=T,
    )


def ul_energy_efficiency(rates, eta, P_u: float) -> float:
    """``sum_k R_k / (P_u sum_k eta_k)``."""
    total = float(np.sum(eta))
    if total <= 0:
        raise ValueError("energy efficiency undefined for all-zero power")
    return float(np.sum(rates)) / (P_u * total)
