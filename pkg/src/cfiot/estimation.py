"""LMMSE channel estimation from non-orthogonal pilots.

Every AP ``m`` observes ``y_m = sqrt(tau rho_p) Psi g_[m] + w_m`` and forms
``ghat_mk = a_mk^H y_m`` with ``a_mk = sqrt(tau rho_p) beta_mk C_m^{-1} psi_k``
and ``C_m = tau rho_p Psi B_m Psi^H + I``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .netgen import Scenario

__all__ = [
    "EstimationError",
    "EstimationStats",
    "ChannelDraw",
    "compute_stats",
    "ap_estimator",
    "draw_channel",
    "draw_channels",
    "estimate_cross_cov",
    "analytic_cross_cov",
]

# Above this many complex entries the a_mk vectors are recomputed on demand.
KEEP_A_LIMIT = 4_000_000
IMAG_TOL = 1e-9


class EstimationError(RuntimeError):
    pass


def ap_estimator(pilots: np.ndarray, beta_m: np.ndarray, tau_rho_p: float) -> np.ndarray:
    """Estimator vectors of one AP as a ``(tau, K)`` matrix, column k = a_mk."""
    tau = pilots.shape[0]
    C = tau_rho_p * (pilots * beta_m[None, :]) @ pilots.conj().T + np.eye(tau)
    try:
        fac = cho_factor(C, lower=True)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("pilot covariance factorization failed") from exc
    return np.sqrt(tau_rho_p) * beta_m[None, :] * cho_solve(fac, pilots)


@dataclass(frozen=True, eq=False)
class EstimationStats:
    """Second-order statistics of the LMMSE estimates.

    ``gamma[m, k]`` is the variance of ``ghat_mk``. ``a`` holds the estimator
    vectors with shape ``(M, K, tau)`` when small enough to keep, else None.
    ``a_norm2`` is ``||a_mk||^2`` and ``contam[m, k]`` is
    ``sum_j beta_mj |psi_j^H a_mk|^2``.
    """

    beta: np.ndarray
    gamma: np.ndarray
    pilots: np.ndarray
    tau_rho_p: float
    a_norm2: np.ndarray
    contam: np.ndarray
    a: np.ndarray | None = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return self.gamma.shape[0]

    @property
    def K(self) -> int:
        return self.gamma.shape[1]

    def B(self, m: int) -> np.ndarray:
        """Diagonal of B_m (the beta row of AP m)."""
        return self.beta[m]

    def Gamma(self, k: int) -> np.ndarray:
        """Diagonal of Gamma_k (the gamma column of thing k)."""
        return self.gamma[:, k]

    def estimator(self, m: int) -> np.ndarray:
        """``(tau, K)`` estimator matrix of AP m."""
        if self.a is not None:
            return self.a[m].T
        return ap_estimator(self.pilots, self.beta[m], self.tau_rho_p)

    def iter_estimators(self) -> Iterator[tuple[int, np.ndarray]]:
        for m in range(self.M):
            yield m, self.estimator(m)


def compute_stats(scn: Scenario, keep_a: bool | None = None) -> EstimationStats:
    """LMMSE estimator vectors and estimate variances for every (AP, thing) pair.

    One Cholesky factorization of ``C_m`` per AP serves all K pilots.
    """
    M, K, tau = scn.M, scn.K, scn.tau
    trp = tau * scn.rho_p
    if keep_a is None:
        keep_a = M * K * tau <= KEEP_A_LIMIT
    psi = scn.pilots
    gamma = np.empty((M, K))
    a_norm2 = np.empty((M, K))
    contam = np.empty((M, K))
    a_all = np.empty((M, K, tau), dtype=complex) if keep_a else None
    for m in range(M):
        A = ap_estimator(psi, scn.beta[m], trp)
        # (K, K): [j, k] = psi_j^H a_mk
        proj = psi.conj().T @ A
        g = np.sqrt(trp) * scn.beta[m] * np.diag(proj)
        if np.max(np.abs(g.imag), initial=0.0) > IMAG_TOL * max(1.0, np.max(np.abs(g.real))):
            raise EstimationError("estimate variance has a non-negligible imaginary part")
        gamma[m] = g.real
        a_norm2[m] = np.sum(np.abs(A) ** 2, axis=0)
        contam[m] = scn.beta[m] @ (np.abs(proj) ** 2)
        if keep_a:
            a_all[m] = A.T
    # Round-off can push gamma a hair past beta.
    gamma = np.clip(gamma, 0.0, scn.beta)
    return EstimationStats(
        beta=scn.beta,
        gamma=gamma,
        pilots=psi,
        tau_rho_p=trp,
        a_norm2=a_norm2,
        contam=contam,
        a=a_all,
    )


@dataclass(frozen=True, eq=False)
class ChannelDraw:
    """One small-scale realization: true channels, estimates, pilot observations."""

    G: np.ndarray
    G_hat: np.ndarray
    Y: np.ndarray

    @property
    def G_err(self) -> np.ndarray:
        return self.G - self.G_hat


def _crandn(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def _estimate(stats: EstimationStats, Y: np.ndarray) -> np.ndarray:
    # Y: (..., M, tau) -> (..., M, K)
    if stats.a is not None:
        return np.einsum("mkt,...mt->...mk", stats.a.conj(), Y)
    out = np.empty(Y.shape[:-1] + (stats.K,), dtype=complex)
    for m, A in stats.iter_estimators():
        out[..., m, :] = Y[..., m, :] @ A.conj()
    return out


def draw_channels(scn: Scenario, stats: EstimationStats, n: int, rng: np.random.Generator):
    """``n`` independent draws stacked along a leading axis.

    Returns ``(G, G_hat, Y)`` with shapes ``(n, M, K)``, ``(n, M, K)`` and
    ``(n, M, tau)``.
    """
    M, K, tau = scn.M, scn.K, scn.tau
    G = np.sqrt(scn.beta) * _crandn(rng, (n, M, K))
    W = _crandn(rng, (n, M, tau))
    Y = np.sqrt(stats.tau_rho_p) * G @ scn.pilots.T + W
    return G, _estimate(stats, Y), Y


def draw_channel(scn: Scenario, stats: EstimationStats, rng: np.random.Generator) -> ChannelDraw:
    """Draw channels and pilot noise once, then estimate."""
    G, G_hat, Y = draw_channels(scn, stats, 1, rng)
    return ChannelDraw(G=G[0], G_hat=G_hat[0], Y=Y[0])


def estimate_cross_cov(
    scn: Scenario,
    stats: EstimationStats,
    n_draws: int,
    rng: np.random.Generator,
    batch: int = 500,
) -> np.ndarray:
    """Empirical ``Cov[ghat_mk, ghat_ml]`` averaged over APs, shape ``(K, K)``.

    Estimates are zero-mean, so the covariance is ``E[ghat_mk conj(ghat_ml)]``.
    """
    if n_draws < 100:
        raise ValueError("n_draws must be at least 100")
    acc = np.zeros((scn.K, scn.K), dtype=complex)
    done = 0
    while done < n_draws:
        n = min(batch, n_draws - done)
        _, G_hat, _ = draw_channels(scn, stats, n, rng)
        acc += np.einsum("nmk,nml->kl", G_hat, G_hat.conj())
        done += n
    return acc / (n_draws * scn.M)


def analytic_cross_cov(scn: Scenario, stats: EstimationStats) -> np.ndarray:
    """Exact AP-averaged ``Cov[ghat_mk, ghat_ml] = sqrt(tau rho_p) beta_mk psi_k^H a_ml``."""
    acc = np.zeros((scn.K, scn.K), dtype=complex)
    s = np.sqrt(stats.tau_rho_p)
    for m, A in stats.iter_estimators():
        acc += s * scn.beta[m][:, None] * (scn.pilots.conj().T @ A)
    return acc / scn.M
