"""Uplink SINR with the MMSE receiver and its random-matrix approximation.

Per-thing transmit powers enter every formula through the effective SNR
``rho_u * nu_k * eta_k``; scaling ``nu`` by ``c`` and ``rho_u`` by ``1/c``
leaves all results unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .estimation import ChannelDraw, EstimationStats
from .netgen import RadioConfig

__all__ = [
    "UlPowerAllocation",
    "RmState",
    "NotConvergedError",
    "effective_power",
    "noise_plus_error_matrix",
    "exact_mmse_sinr",
    "combiner_sinr",
    "mmse_combiners",
    "rm_fixed_point",
    "rm_T_diag",
    "rm_sinr",
    "rate_and_throughput",
    "throughput_factor",
]


class NotConvergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class UlPowerAllocation:
    """Uplink power coefficients with rate weights ``u`` and power weights ``nu``."""

    eta: np.ndarray
    u: np.ndarray | None = None
    nu: np.ndarray | None = None

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float)
        if np.any(eta < 0) or np.any(eta > 1 + 1e-12):
            raise ValueError("power coefficients must lie in [0, 1]")
        K = eta.shape[0]
        u = np.full(K, 1.0 / np.sqrt(K)) if self.u is None else np.asarray(self.u, dtype=float)
        nu = np.ones(K) if self.nu is None else np.asarray(self.nu, dtype=float)
        if np.any(u < 0) or np.any(nu < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "eta", np.clip(eta, 0.0, 1.0))
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "nu", nu)

    @classmethod
    def full(cls, K: int, **kw) -> "UlPowerAllocation":
        return cls(np.ones(K), **kw)


def effective_power(alloc: UlPowerAllocation, rho_u: float) -> np.ndarray:
    """Per-thing ``rho_u * nu_k * eta_k``."""
    return rho_u * alloc.nu * alloc.eta


def noise_plus_error_matrix(stats: EstimationStats, alloc: UlPowerAllocation, rho_u: float) -> np.ndarray:
    """Diagonal of ``D = rho_u sum_k eta_k (B_k - Gamma_k) + I`` as an M-vector."""
    p = effective_power(alloc, rho_u)
    return (stats.beta - stats.gamma) @ p + 1.0


def _lambda(G_hat: np.ndarray, p: np.ndarray, D: np.ndarray) -> np.ndarray:
    lam = (G_hat * p[None, :]) @ G_hat.conj().T
    lam[np.diag_indices_from(lam)] += D
    return lam


def exact_mmse_sinr(
    draw: ChannelDraw | np.ndarray,
    stats: EstimationStats,
    alloc: UlPowerAllocation,
    rho_u: float,
) -> np.ndarray:
    """Exact per-thing SINR of the MMSE receiver for one channel draw.

    Uses ``q_k = p_k ghat_k^H Lambda^{-1} ghat_k`` with one Cholesky
    factorization of ``Lambda`` and returns ``q_k / (1 - q_k)``.
    """
    G_hat = draw.G_hat if isinstance(draw, ChannelDraw) else np.asarray(draw)
    p = effective_power(alloc, rho_u)
    D = noise_plus_error_matrix(stats, alloc, rho_u)
    fac = cho_factor(_lambda(G_hat, p, D), lower=True)
    X = cho_solve(fac, G_hat)
    q = p * np.real(np.sum(G_hat.conj() * X, axis=0))
    return q / (1.0 - q)


def mmse_combiners(G_hat: np.ndarray, stats: EstimationStats, alloc: UlPowerAllocation, rho_u: float) -> np.ndarray:
    """MMSE receive vectors as columns, ``v_k = sqrt(p_k) Lambda^{-1} ghat_k``."""
    p = effective_power(alloc, rho_u)
    D = noise_plus_error_matrix(stats, alloc, rho_u)
    fac = cho_factor(_lambda(G_hat, p, D), lower=True)
    return cho_solve(fac, G_hat) * np.sqrt(p)[None, :]


def combiner_sinr(
    V: np.ndarray,
    G_hat: np.ndarray,
    stats: EstimationStats,
    alloc: UlPowerAllocation,
    rho_u: float,
) -> np.ndarray:
    """SINR of arbitrary linear receivers (columns of ``V``) treating the
    estimation error as uncorrelated noise."""
    p = effective_power(alloc, rho_u)
    D = noise_plus_error_matrix(stats, alloc, rho_u)
    # cross[j, k] = v_k^H ghat_j
    cross = np.abs(G_hat.conj().T @ V) ** 2
    signal = p * np.diag(cross)
    interference = p @ cross - signal
    noise = np.real(np.sum(np.abs(V) ** 2 * D[:, None], axis=0))
    return signal / (interference + noise)


@dataclass(frozen=True)
class RmState:
    """Converged (or not) random-matrix fixed point.

    ``T_diag`` is the diagonal of ``T``; ``deltas`` records the max change of
    ``e`` at each iteration.
    """

    e: np.ndarray
    T_diag: np.ndarray
    iterations: int
    converged: bool
    deltas: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)


def rm_T_diag(stats: EstimationStats, p: np.ndarray, e: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Diagonal of ``T = ((1/M) sum_k p_k Gamma_k / (1 + e_k) + D/M)^{-1}``."""
    M = stats.M
    return M / (stats.gamma @ (p / (1.0 + e)) + D)


def rm_fixed_point(
    stats: EstimationStats,
    alloc: UlPowerAllocation,
    rho_u: float,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> RmState:
    """Iterate ``e_k = (p_k / M) tr(Gamma_k T(e))`` from ``e_k = M``.

    Stops when every ``|e_k^(t) - e_k^(t-1)| <= tol * e_k^(t)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    M = stats.M
    p = effective_power(alloc, rho_u)
    D = noise_plus_error_matrix(stats, alloc, rho_u)
    e = np.full(stats.K, float(M))
    deltas = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        T = rm_T_diag(stats, p, e, D)
        e_new = p * (T @ stats.gamma) / M
        diff = np.abs(e_new - e)
        deltas.append(diff.max(initial=0.0))
        e = e_new
        if np.all(diff <= tol * np.abs(e_new)):
            converged = True
            break
    T = rm_T_diag(stats, p, e, D)
    return RmState(e=e, T_diag=T, iterations=it, converged=converged, deltas=np.array(deltas))


def rm_sinr(state: RmState, stats: EstimationStats, alloc: UlPowerAllocation, rho_u: float) -> np.ndarray:
    """Deterministic SINR ``p_k tr(Gamma_k T) / M``."""
    if not state.converged:
        raise NotConvergedError("random-matrix fixed point did not converge")
    p = effective_power(alloc, rho_u)
    return p * (state.T_diag @ stats.gamma) / stats.M


def throughput_factor(cfg: RadioConfig) -> float:
    """Hz of useful bandwidth per bit/s/Hz: ``B (tau_c - tau) / (2 tau_c)``."""
    return cfg.bandwidth * (cfg.tau_c - cfg.tau) / (2.0 * cfg.tau_c)


def rate_and_throughput(sinr, cfg: RadioConfig) -> tuple[np.ndarray, np.ndarray]:
    """Spectral efficiency ``log2(1 + SINR)`` and throughput in bit/s."""
    sinr = np.asarray(sinr, dtype=float)
    if np.any(sinr < 0):
        raise ValueError("SINR must be nonnegative")
    rate = np.log2(1.0 + sinr)
    return rate, throughput_factor(cfg) * rate
