"""Network scenario generation.

APs and things are dropped uniformly on a ``D x D`` square that is wrapped
around (torus) so that no node sees a boundary. Large-scale fading combines a
three-slope path loss with a COST231-Hata constant and log-normal shadowing,
optionally correlated in space.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

__all__ = [
    "RadioConfig",
    "Scenario",
    "ScenarioError",
    "wrap_distance",
    "pairwise_wrap_distance",
    "hata_constant",
    "path_loss_db",
    "path_loss",
    "shadow_field",
    "make_pilots",
    "noise_power_mw",
    "generate_scenario",
    "load_config",
    "dump_scenario",
]

MIN_DISTANCE = 1.0  # m
SHADOW_JITTER = 1e-10


class ScenarioError(ValueError):
    """Raised for invalid radio configurations or failed scenario generation."""


@dataclass(frozen=True)
class RadioConfig:
    """Radio and propagation constants shared by every scenario.

    Powers are in mW, distances in m, ``carrier_freq`` in GHz and
    ``bandwidth`` in Hz.
    """

    carrier_freq: float = 1.9
    bandwidth: float = 20e6
    tau: int = 32
    tau_c: int = 200
    P_u: float = 20.0
    P_p: float = 20.0
    P_d: float = 200.0
    noise_figure: float = 9.0
    sigma_sh: float = 8.0
    shadow_mode: str = "iid"
    shadow_decorr_dist: float = 100.0
    shadow_split: float = 0.5
    ap_height: float = 15.0
    thing_height: float = 1.65
    d0: float = 10.0
    d1: float = 50.0
    pilot_mode: str = "random"

    def __post_init__(self):
        if self.tau < 1:
            raise ScenarioError(f"pilot length must be >= 1, got {self.tau}")
        if self.tau_c <= self.tau:
            raise ScenarioError("coherence length must exceed the pilot length")
        if min(self.P_u, self.P_p, self.P_d) <= 0:
            raise ScenarioError("all transmit powers must be positive")
        if not 0.0 <= self.shadow_split <= 1.0:
            raise ScenarioError("shadow_split must lie in [0, 1]")
        if not 0.0 < self.d0 < self.d1:
            raise ScenarioError("breakpoints must satisfy 0 < d0 < d1")
        if self.sigma_sh < 0:
            raise ScenarioError("sigma_sh must be nonnegative")
        if self.shadow_mode not in ("iid", "correlated"):
            raise ScenarioError(f"unknown shadow_mode {self.shadow_mode!r}")
        if self.shadow_mode == "correlated" and self.shadow_decorr_dist <= 0:
            raise ScenarioError("decorrelation distance must be positive")
        if self.pilot_mode not in ("random", "orthogonal"):
            raise ScenarioError(f"unknown pilot_mode {self.pilot_mode!r}")

    def replace(self, **changes) -> "RadioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class Scenario:
    """One network realization: geometry, large-scale fading and pilots.

    ``beta`` has shape ``(M, K)`` and ``pilots`` shape ``(tau, K)``; the
    normalized SNRs ``rho_*`` are transmit powers over the thermal noise.
    """

    M: int
    K: int
    D: float
    ap_pos: np.ndarray
    thing_pos: np.ndarray
    beta: np.ndarray
    pilots: np.ndarray
    rho_p: float
    rho_u: float
    rho_d: float
    cfg: RadioConfig
    seed: int | None = None
    z: np.ndarray | None = field(default=None, repr=False)

    @property
    def tau(self) -> int:
        return self.pilots.shape[0]

    @property
    def area_km2(self) -> float:
        return (self.D / 1000.0) ** 2

    def with_beta(self, beta: np.ndarray) -> "Scenario":
        """Copy of this scenario with a different large-scale fading matrix."""
        return dataclasses.replace(self, beta=np.asarray(beta, dtype=float))


def wrap_distance(p, q, D: float):
    """Torus distance between points ``p`` and ``q`` on a ``D x D`` square.

    Broadcasts over leading dimensions; the last axis holds ``(x, y)``.
    """
    delta = np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float))
    delta = np.minimum(delta, D - delta)
    return np.sqrt(np.sum(delta**2, axis=-1))


def pairwise_wrap_distance(a: np.ndarray, b: np.ndarray, D: float) -> np.ndarray:
    """``(len(a), len(b))`` matrix of torus distances."""
    return wrap_distance(a[:, None, :], b[None, :, :], D)


def hata_constant(cfg: RadioConfig) -> float:
    """COST231-Hata constant ``L`` in dB (carrier in MHz, heights in m)."""
    f_mhz = cfg.carrier_freq * 1e3
    lf = np.log10(f_mhz)
    return float(
        46.3
        + 33.9 * lf
        - 13.82 * np.log10(cfg.ap_height)
        - (1.1 * lf - 0.7) * cfg.thing_height
        + (1.56 * lf - 0.8)
    )


def path_loss_db(d, cfg: RadioConfig):
    """Three-slope path loss in dB (a negative number) at distance ``d`` m."""
    L = hata_constant(cfg)
    d_km = np.maximum(np.asarray(d, dtype=float), MIN_DISTANCE) / 1e3
    d0_km, d1_km = cfg.d0 / 1e3, cfg.d1 / 1e3
    far = -L - 35.0 * np.log10(d_km)
    mid = -L - 15.0 * np.log10(d1_km) - 20.0 * np.log10(d_km)
    near = -L - 15.0 * np.log10(d1_km) - 20.0 * np.log10(d0_km)
    return np.where(d_km > d1_km, far, np.where(d_km > d0_km, mid, near))


def path_loss(d, cfg: RadioConfig):
    """Three-slope path loss as a linear power gain."""
    return 10.0 ** (path_loss_db(d, cfg) / 10.0)


def _gaussian_field(pos: np.ndarray, D: float, decorr: float, rng: np.random.Generator):
    # Coincident points share one sample exactly.
    uniq, inverse = np.unique(pos, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    cov = np.exp(-pairwise_wrap_distance(uniq, uniq, D) / decorr)
    cov[np.diag_indices_from(cov)] += SHADOW_JITTER
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ScenarioError("shadowing covariance is not positive semidefinite") from exc
    return (chol @ rng.standard_normal(len(uniq)))[inverse]


def shadow_field(
    ap_pos: np.ndarray,
    thing_pos: np.ndarray,
    cfg: RadioConfig,
    rng: np.random.Generator,
    D: float | None = None,
) -> np.ndarray:
    """Standard-normal shadowing exponents ``z`` of shape ``(M, K)``.

    In correlated mode ``z_mk = sqrt(delta) a_m + sqrt(1 - delta) b_k`` with
    exponentially correlated fields ``a`` (over APs) and ``b`` (over things).
    """
    M, K = len(ap_pos), len(thing_pos)
    if cfg.shadow_mode == "iid":
        return rng.standard_normal((M, K))
    if D is None:
        D = float(max(ap_pos.max(initial=0.0), thing_pos.max(initial=0.0))) + 1e-9
    a = _gaussian_field(ap_pos, D, cfg.shadow_decorr_dist, rng)
    b = _gaussian_field(thing_pos, D, cfg.shadow_decorr_dist, rng)
    delta = cfg.shadow_split
    return np.sqrt(delta) * a[:, None] + np.sqrt(1.0 - delta) * b[None, :]


def make_pilots(tau: int, K: int, rng: np.random.Generator, mode: str = "random") -> np.ndarray:
    """Unit-norm pilot matrix of shape ``(tau, K)``.

    ``random`` draws i.i.d. complex Gaussian columns; ``orthogonal`` takes K
    columns of a Haar-random unitary and requires ``K <= tau``.
    """
    if mode == "orthogonal":
        if K > tau:
            raise ScenarioError(f"orthogonal pilots need K <= tau (K={K}, tau={tau})")
        z = rng.standard_normal((tau, tau)) + 1j * rng.standard_normal((tau, tau))
        q, r = np.linalg.qr(z)
        q = q * (np.diag(r) / np.abs(np.diag(r)))[None, :]
        return q[:, :K]
    if mode != "random":
        raise ScenarioError(f"unknown pilot mode {mode!r}")
    psi = rng.standard_normal((tau, K)) + 1j * rng.standard_normal((tau, K))
    return psi / np.linalg.norm(psi, axis=0, keepdims=True)


def noise_power_mw(cfg: RadioConfig) -> float:
    """Thermal noise power over the band, in mW."""
    n0_dbm = -174.0 + 10.0 * np.log10(cfg.bandwidth) + cfg.noise_figure
    return float(10.0 ** (n0_dbm / 10.0))


def generate_scenario(
    M: int,
    K: int,
    D: float,
    cfg: RadioConfig | None = None,
    rng: np.random.Generator | int | None = None,
) -> Scenario:
    """Drop ``M`` APs and ``K`` things on a wrapped ``D x D`` square.

    Parameters
    ----------
    M, K : int
        Number of APs and of active things.
    D : float
        Side of the square in meters.
    cfg : RadioConfig, optional
        Radio constants; defaults to ``RadioConfig()``.
    rng : Generator or int, optional
        Random stream, or an integer seed recorded in the scenario.

    Returns
    -------
    Scenario
    """
    cfg = cfg or RadioConfig()
    if M < 1 or K < 1:
        raise ScenarioError(f"need M >= 1 and K >= 1, got M={M}, K={K}")
    if D <= 0:
        raise ScenarioError("side length must be positive")
    seed = None
    if rng is None or isinstance(rng, (int, np.integer)):
        seed = None if rng is None else int(rng)
        rng = np.random.default_rng(seed)

    # Draw order is fixed: geometry, shadowing, pilots. Changing tau keeps
    # geometry and shadowing for the same seed.
    ap_pos = rng.uniform(0.0, D, size=(M, 2))
    thing_pos = rng.uniform(0.0, D, size=(K, 2))
    dist = pairwise_wrap_distance(ap_pos, thing_pos, D)
    pl_db = path_loss_db(dist, cfg)
    z = shadow_field(ap_pos, thing_pos, cfg, rng, D=D)
    beta = 10.0 ** ((pl_db + cfg.sigma_sh * z) / 10.0)
    pilots = make_pilots(cfg.tau, K, rng, cfg.pilot_mode)

    n0 = noise_power_mw(cfg)
    return Scenario(
        M=M,
        K=K,
        D=float(D),
        ap_pos=ap_pos,
        thing_pos=thing_pos,
        beta=beta,
        pilots=pilots,
        rho_p=cfg.P_p / n0,
        rho_u=cfg.P_u / n0,
        rho_d=cfg.P_d / n0,
        cfg=cfg,
        seed=seed,
        z=z,
    )


_SCENARIO_KEYS = ("M", "K", "D", "seed")


def load_config(path: str | Path) -> tuple[RadioConfig, dict[str, Any]]:
    """Read a JSON config holding RadioConfig fields and scenario fields.

    Returns the radio config and a dict with whichever of ``M``, ``K``, ``D``
    and ``seed`` were present. Unknown keys are an error.
    """
    data = json.loads(Path(path).read_text())
    return config_from_dict(data)


def config_from_dict(data: dict[str, Any]) -> tuple[RadioConfig, dict[str, Any]]:
    radio_fields = {f.name for f in dataclasses.fields(RadioConfig)}
    unknown = set(data) - radio_fields - set(_SCENARIO_KEYS)
    if unknown:
        raise ScenarioError(f"unknown config keys: {sorted(unknown)}")
    cfg = RadioConfig(**{k: v for k, v in data.items() if k in radio_fields})
    scn = {k: data[k] for k in _SCENARIO_KEYS if k in data}
    return cfg, scn


def scenario_to_dict(scn: Scenario) -> dict[str, Any]:
    return {
        "M": scn.M,
        "K": scn.K,
        "D": scn.D,
        "seed": scn.seed,
        "config": scn.cfg.to_dict(),
        "ap_pos": scn.ap_pos.tolist(),
        "thing_pos": scn.thing_pos.tolist(),
        "beta_db": (10.0 * np.log10(scn.beta)).tolist(),
    }


def dump_scenario(scn: Scenario, path: str | Path) -> None:
    """Write positions, beta in dB and the seed as JSON."""
    Path(path).write_text(json.dumps(scenario_to_dict(scn), indent=1))
