"""Downlink maximum-ratio precoding: closed-form SINR and power control.

Power coefficients ``eta[m, k]`` are normalized so that AP ``m`` radiates the
fraction ``p_m = sum_k eta_mk gamma_mk`` of its budget ``P_d``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .estimation import EstimationStats
from .netgen import RadioConfig, Scenario
from .ul_perf import throughput_factor

__all__ = [
    "DlPowerAllocation",
    "DlSolverError",
    "dl_terms",
    "dl_sinr_closed_form",
    "orth_sinr",
    "pilot_projections",
    "maxmin_dl_full",
    "maxmin_dl_given_p",
    "per_ap_power",
    "uniform_power",
    "dl_rate_and_ee",
    "equalize_columns",
]

log = logging.getLogger(__name__)

# Candidate points are re-verified with the closed form, so moderate
# interior-point tolerances suffice.
_CLARABEL_OPTS = dict(tol_gap_abs=1e-6, tol_gap_rel=1e-6, tol_feas=1e-7)


class DlSolverError(RuntimeError):
    pass


def per_ap_power(eta: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Normalized per-AP power ``p_m = sum_k eta_mk gamma_mk``."""
    return np.sum(np.asarray(eta) * gamma, axis=1)


@dataclass(frozen=True)
class DlPowerAllocation:
    """Downlink coefficients ``eta`` (M, K) and the per-AP powers they imply.

    ``info`` carries solver diagnostics (bisection trace, slack, timings).
    """

    eta: np.ndarray
    p: np.ndarray
    info: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_eta(cls, eta: np.ndarray, gamma: np.ndarray, **info) -> "DlPowerAllocation":
        eta = np.maximum(np.asarray(eta, dtype=float), 0.0)
        return cls(eta=eta, p=per_ap_power(eta, gamma), info=info)


def pilot_projections(stats: EstimationStats) -> np.ndarray:
    """``X[m, k, j] = psi_k^H a_mj`` for every AP; shape ``(M, K, K)``."""
    if stats.a is not None:
        return np.einsum("tk,mjt->mkj", stats.pilots.conj(), stats.a)
    X = np.empty((stats.M, stats.K, stats.K), dtype=complex)
    for m, A in stats.iter_estimators():
        X[m] = stats.pilots.conj().T @ A
    return X


def _coherent(stats: EstimationStats, sqrt_eta: np.ndarray, X: np.ndarray | None) -> np.ndarray:
    # C[k, j] = sum_m sqrt(eta_mj) beta_mk psi_k^H a_mj
    if X is not None:
        return np.einsum("mk,mkj,mj->kj", stats.beta, X, sqrt_eta)
    C = np.zeros((stats.K, stats.K), dtype=complex)
    for m, A in stats.iter_estimators():
        C += stats.beta[m][:, None] * (stats.pilots.conj().T @ A) * sqrt_eta[m][None, :]
    return C


def dl_terms(stats: EstimationStats, eta: np.ndarray, rho_d: float, X: np.ndarray | None = None):
    """Numerators and the interference matrix of the closed-form SINR.

    Returns ``(num, I)`` with ``SINR_k = num_k / (1 + sum_j I[k, j])``. Row k
    of ``I`` is linear in column j of ``eta``; ``I[k, k]`` is the beamforming
    gain uncertainty and ``I[k, j]`` (j != k) the interference from thing j
    including the pilot-contamination terms.
    """
    eta = np.maximum(np.asarray(eta, dtype=float), 0.0)
    sqrt_eta = np.sqrt(eta)
    beta, gamma = stats.beta, stats.gamma
    trp = stats.tau_rho_p
    num = rho_d * np.sum(sqrt_eta * gamma, axis=0) ** 2

    spread = stats.a_norm2 + trp * stats.contam
    incoh = beta.T @ (eta * spread)
    coh = trp * np.abs(_coherent(stats, sqrt_eta, X)) ** 2
    I = rho_d * (incoh + coh)
    np.fill_diagonal(I, rho_d * np.sum(eta * gamma * beta, axis=0))
    return num, I


def dl_sinr_closed_form(
    scn: Scenario,
    stats: EstimationStats,
    alloc: DlPowerAllocation | np.ndarray,
    rho_d: float | None = None,
    X: np.ndarray | None = None,
) -> np.ndarray:
    """Closed-form downlink SINR with MR precoding and non-orthogonal pilots."""
    eta = alloc.eta if isinstance(alloc, DlPowerAllocation) else alloc
    rho_d = scn.rho_d if rho_d is None else rho_d
    num, I = dl_terms(stats, eta, rho_d, X)
    return num / (1.0 + I.sum(axis=1))


def orth_sinr(stats: EstimationStats, eta: np.ndarray, p: np.ndarray, rho_d: float) -> np.ndarray:
    """SINR of the reduced problem, where interference is fixed by ``p``."""
    num = rho_d * np.sum(np.sqrt(np.maximum(eta, 0.0)) * stats.gamma, axis=0) ** 2
    return num / (1.0 + rho_d * (p @ stats.beta))


def equalize_columns(num: np.ndarray, I: np.ndarray, target: float, tol: float = 1e-12, max_iter: int = 10_000):
    """Column scalings ``c`` in (0, 1] making every SINR equal to ``target``.

    ``SINR_k(c) = c_k num_k / (1 + sum_j c_j I[k, j])``. Starting from
    ``c = 1`` (where every SINR is at least ``target``) the standard
    interference iteration decreases monotonically to the minimal solution.
    """
    K = len(num)
    off = I - np.diag(np.diag(I))
    denom = num - target * np.diag(I)
    if np.any(denom <= 0):
        raise DlSolverError("target SINR not reachable by column scaling")
    c = np.ones(K)
    for _ in range(max_iter):
        c_new = np.minimum(1.0, target * (1.0 + off @ c) / denom)
        if np.max(np.abs(c_new - c)) <= tol * np.max(c_new):
            return c_new
        c = c_new
    return c


# --------------------------------------------------------------------------
# Full max-min problem: search on the common target with SOCP subproblems


class _FullSocp:
    """Parametrized SOCP in ``z_mk = sqrt(eta_mk gamma_mk)``.

    With ``f_k(z) = sqrt(rho_d) sum_m sqrt(gamma_mk) z_mk`` and ``g_k(z)`` the
    square root of the SINR denominator, ``SINR_k = (f_k / g_k)^2``. Each AP
    satisfies ``||z_m|| <= r_m <= 1``. Two objectives share the constraint set:

    ``"margin"``
        maximize ``s`` subject to ``f_k - sqrt(t) g_k >= s w_k`` with
        ``w_k`` the denominator at the previous point (normalizing the margins
        makes the lower-bound updates converge superlinearly); ``t`` is
        feasible iff the optimum is nonnegative.
    ``"min_power"``
        minimize ``sum_m r_m^2`` subject to ``f_k >= sqrt(t) g_k``.

    Because ``||a_mj||^2 + tau rho_p sum_i beta_mi |psi_i^H a_mj|^2 = gamma_mj``,
    all incoherent terms collapse to ``rho_d sum_m beta_mk ||z_m||^2`` and
    enter through the radii ``r``. The identity is checked on the data; the
    expanded cone is used if it does not hold.
    """

    def __init__(self, stats: EstimationStats, rho_d: float, X: np.ndarray, mode: str = "margin"):
        M, K = stats.M, stats.K
        beta, gamma = stats.beta, stats.gamma
        trp = stats.tau_rho_p
        sg = np.sqrt(gamma)
        spread = stats.a_norm2 + trp * stats.contam
        compact = np.allclose(spread, gamma, rtol=1e-6, atol=0.0)

        self.mode = mode
        self.z = cp.Variable((M, K), nonneg=True)
        self.s = cp.Variable()
        self.sqrt_t = cp.Parameter(nonneg=True)
        self.w = cp.Parameter(K, pos=True, value=np.ones(K))
        z = self.z
        r = cp.Variable(M, nonneg=True)
        cons = [cp.norm(z, 2, axis=1) <= r, r <= 1.0]
        for k in range(K):
            if compact:
                incoh = cp.multiply(np.sqrt(rho_d * beta[:, k]), r)
            else:
                q = rho_d * beta[:, [k]] * spread / gamma
                q[:, k] = rho_d * beta[:, k]
                incoh = cp.vec(cp.multiply(np.sqrt(q), z), order="C")
            W = np.sqrt(rho_d * trp) * beta[:, [k]] * X[:, k, :] / sg
            W[:, k] = 0.0
            g = cp.norm(
                cp.hstack(
                    [
                        np.ones(1),
                        incoh,
                        cp.sum(cp.multiply(W.real, z), axis=0),
                        cp.sum(cp.multiply(W.imag, z), axis=0),
                    ]
                ),
                2,
            )
            f = np.sqrt(rho_d) * cp.sum(cp.multiply(sg[:, k], z[:, k]))
            if mode == "margin":
                cons.append(self.sqrt_t * g + self.s * self.w[k] <= f)
            else:
                cons.append(self.sqrt_t * g <= f)
        if mode == "margin":
            objective = cp.Maximize(self.s)
        elif mode == "min_power":
            objective = cp.Minimize(cp.sum_squares(r))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        self.problem = cp.Problem(objective, cons)

    def solve(self, t: float, w: np.ndarray | None = None) -> tuple[np.ndarray | None, float]:
        """Return ``(z, margin)``; ``z`` is None when the solver proves infeasibility."""
        self.sqrt_t.value = np.sqrt(t)
        if w is not None:
            self.w.value = np.asarray(w, dtype=float)
        try:
            self.problem.solve(solver=cp.CLARABEL, **_CLARABEL_OPTS)
        except cp.SolverError:
            try:
                self.problem.solve(solver=cp.SCS, eps_abs=1e-7, eps_rel=1e-7, max_iters=20_000)
            except cp.SolverError as exc:
                raise DlSolverError("SOCP subproblem failed in both solvers") from exc
        status = self.problem.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return None, -np.inf
        if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            raise DlSolverError(f"SOCP subproblem returned {status}")
        margin = float(self.s.value) if self.mode == "margin" else 0.0
        return np.maximum(self.z.value, 0.0), margin


def _z_to_eta(z: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    return z**2 / gamma


def maxmin_dl_full(
    scn: Scenario,
    stats: EstimationStats,
    rho_d: float | None = None,
    tol: float = 1e-3,
    max_steps: int = 100,
) -> tuple[DlPowerAllocation, float]:
    """Max-min downlink SINR over all ``eta`` with per-AP power constraints.

    Keeps a bracket ``[lo, hi]`` on the optimal common SINR: ``lo`` starts at
    the uniform full-power allocation, ``hi`` at
    ``min_k rho_d (sum_m sqrt(gamma_mk))^2``. Each step probes
    ``t = lo (1 + tol)`` with the normalized margin SOCP. An infeasible probe
    closes the bracket; a feasible one lifts ``lo`` to the closed-form min
    SINR of the returned point, which is usually far above ``t``. A final SOCP at
    ``lo (1 - tol/2)`` minimizes radiated power, and per-thing scaling equalizes all SINRs.

    Returns
    -------
    alloc : DlPowerAllocation
        ``alloc.info`` has the probe trace and the final bracket.
    min_sinr : float
    """
    rho_d = scn.rho_d if rho_d is None else rho_d
    X = pilot_projections(stats)
    gamma = stats.gamma

    def sinr_of(eta):
        return dl_sinr_closed_form(scn, stats, eta, rho_d, X)

    def denom_of(eta):
        _, I = dl_terms(stats, eta, rho_d, X)
        return np.sqrt(1.0 + I.sum(axis=1))

    # Start from the better of uniform full power and the reduced solution
    # at full per-AP power; both are feasible.
    best = uniform_power(stats, np.ones(stats.M)).eta
    lo = float(np.min(sinr_of(best)))
    try:
        cand = maxmin_dl_given_p(scn, stats, np.ones(stats.M), rho_d).eta
    except DlSolverError:
        cand = None
    if cand is not None and np.min(sinr_of(cand)) > lo:
        best, lo = cand, float(np.min(sinr_of(cand)))
    hi = float(np.min(rho_d * np.sum(np.sqrt(gamma), axis=0) ** 2))
    if lo <= 0:
        raise DlSolverError("uniform full power gives zero SINR")

    margin_prob = _FullSocp(stats, rho_d, X, "margin")
    trace = []
    lowest_infeasible = np.inf
    for _ in range(max_steps):
        if hi <= lo * (1.0 + tol):
            break
        t = min(lo * (1.0 + tol), np.sqrt(lo * hi))
        z, margin = margin_prob.solve(t, denom_of(best))
        achieved = -np.inf
        if z is not None and margin >= 0:
            eta = _z_to_eta(z, gamma)
            achieved = float(np.min(sinr_of(eta)))
        feasible = achieved >= t * (1.0 - 1e-6)
        trace.append((t, margin, feasible))
        if feasible:
            if t >= lowest_infeasible:
                raise DlSolverError("target feasibility is not monotone")
            lo, best = max(t, min(achieved, hi)), eta
        else:
            lowest_infeasible = min(lowest_infeasible, t)
            hi = t
    else:
        raise DlSolverError("target search did not close the bracket")

    # Exactly at lo the feasible set is nearly a point and the solver can
    # stall, so back off by half the tolerance.
    t_final = lo * (1.0 - 0.5 * tol)
    try:
        z, _ = _FullSocp(stats, rho_d, X, "min_power").solve(t_final)
    except DlSolverError:
        z = None
    if z is not None:
        eta = _z_to_eta(z, gamma)
        if np.min(sinr_of(eta)) >= t_final * (1.0 - 1e-6):
            best = eta
        else:
            log.debug("min-power point missed the target; keeping the search point")
    num, I = dl_terms(stats, best, rho_d, X)
    target = float(np.min(num / (1.0 + I.sum(axis=1))))
    c = equalize_columns(num, I, target)
    alloc = DlPowerAllocation.from_eta(best * c[None, :], gamma, trace=trace, bracket=(lo, hi))
    return alloc, float(np.min(sinr_of(alloc.eta)))


# --------------------------------------------------------------------------
# Reduced problem with known per-AP powers


def _given_p_socp(stats: EstimationStats, p: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # max s  s.t.  sum_m sqrt(gamma_mk) z_mk >= s * weights_k,  ||z_m|| <= sqrt(p_m)
    M, K = stats.M, stats.K
    sg = np.sqrt(stats.gamma)
    z = cp.Variable((M, K), nonneg=True)
    s = cp.Variable()
    cons = [
        cp.norm(z, 2, axis=1) <= np.sqrt(p),
        cp.sum(cp.multiply(sg, z), axis=0) >= s * weights,
    ]
    prob = cp.Problem(cp.Maximize(s), cons)
    try:
        prob.solve(solver=cp.CLARABEL)
    except cp.SolverError:
        prob.solve(solver=cp.SCS, eps=1e-9)
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise DlSolverError(f"reduced problem returned {prob.status}")
    return np.maximum(z.value, 0.0)


def maxmin_dl_given_p(
    scn: Scenario,
    stats: EstimationStats,
    p: np.ndarray,
    rho_d: float | None = None,
    tol: float = 1e-3,
) -> DlPowerAllocation:
    """Max-min of the reduced SINR when the per-AP powers ``p`` are known.

    With interference fixed by ``p`` the problem is jointly convex in the
    square-root coefficients and the common level, so one SOCP replaces the
    bisection. The power equality is relaxed to ``<=``; each AP row is then
    scaled up to use exactly ``p_m`` unless that lowers some thing's
    closed-form SINR, in which case the relaxed point is kept and the slack
    reported in ``info["slack"]``.
    """
    rho_d = scn.rho_d if rho_d is None else rho_d
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    gamma = stats.gamma
    if not np.any(p > 0):
        return DlPowerAllocation.from_eta(np.zeros_like(gamma), gamma, slack=np.zeros_like(p))

    weights = np.sqrt((1.0 + rho_d * (p @ stats.beta)) / rho_d)
    z = _given_p_socp(stats, p, weights)
    eta = _z_to_eta(z, gamma)
    # Things above the max-min level hold surplus power that only adds
    # interference; the reduced SINR is linear in each column, so trim it.
    red = orth_sinr(stats, eta, p, rho_d)
    if np.all(red > 0):
        eta = eta * (red.min() / red)[None, :]

    used = per_ap_power(eta, gamma)
    scale = np.ones_like(p)
    active = used > 0
    scale[active] = p[active] / used[active]
    filled = eta * scale[:, None]
    before = dl_sinr_closed_form(scn, stats, eta, rho_d)
    after = dl_sinr_closed_form(scn, stats, filled, rho_d)
    if np.all(after >= before * (1.0 - 1e-12)):
        return DlPowerAllocation.from_eta(filled, gamma, slack=np.zeros_like(p), rescaled=True)
    return DlPowerAllocation.from_eta(eta, gamma, slack=p - used, rescaled=False)


def uniform_power(stats: EstimationStats, p: np.ndarray) -> DlPowerAllocation:
    """Same coefficient for every thing at an AP: ``eta_m = p_m / sum_k gamma_mk``."""
    p = np.asarray(p, dtype=float)
    tot = stats.gamma.sum(axis=1)
    eta_m = np.divide(p, tot, out=np.zeros_like(p), where=tot > 0)
    eta = np.repeat(eta_m[:, None], stats.K, axis=1)
    return DlPowerAllocation(eta=eta, p=np.where(tot > 0, p, 0.0))


def dl_rate_and_ee(sinr, p, P_d: float, cfg: RadioConfig) -> tuple[np.ndarray, float]:
    """Per-thing spectral efficiency and downlink energy efficiency.

    ``E_d = sum_k U_k / sum_m p_m P_d`` with throughputs ``U_k`` in bit/s and
    powers converted to W, i.e. bit/J.
    """
    rates = np.log2(1.0 + np.asarray(sinr, dtype=float))
    total_w = float(np.sum(p)) * P_d / 1e3
    if total_w <= 0:
        raise ValueError("energy efficiency undefined for zero radiated power")
    return rates, float(np.sum(throughput_factor(cfg) * rates)) / total_w
