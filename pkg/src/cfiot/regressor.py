"""Per-AP downlink power predictor: sorted large-scale-fading features and a
small feed-forward network trained with Levenberg-Marquardt.

The network maps the features of one AP to its normalized transmit power
``p_m`` in [0, 1]. Features have a fixed length independent of M and K, so a
model trained on small networks applies unchanged to larger ones of the same
density.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .dl_power import DlSolverError, maxmin_dl_full
from .estimation import EstimationError, compute_stats
from .netgen import RadioConfig, ScenarioError, generate_scenario

__all__ = [
    "FORMAT_VERSION",
    "FLOOR_DB",
    "LmError",
    "TrainRecord",
    "Dataset",
    "ScenarioSpec",
    "LmParams",
    "NetSpec",
    "Regressor",
    "TrainHistory",
    "ap_features",
    "build_dataset",
    "init_regressor",
    "train_lm",
    "lm_step",
    "predict",
    "predict_powers",
    "jacobian",
    "jacobian_fd_check",
    "save_regressor",
    "load_regressor",
]

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
FLOOR_DB = -250.0
ACTIVATIONS = ("tanh", "sigmoid", "linear")


class LmError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# features and datasets


def ap_features(beta: np.ndarray, n_top: int = 8, floor_db: float = FLOOR_DB) -> np.ndarray:
    """Fixed-length features for every AP.

    Row m holds the ``n_top`` largest ``beta_mk`` in dB (descending, padded
    with ``floor_db`` when K < n_top) followed by the dB value of the sum of
    the remaining entries (``floor_db`` if there are none).

    Parameters
    ----------
    beta : ndarray
        ``(M, K)`` large-scale fading, or a single ``(K,)`` row.
    """
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    M, K = beta.shape
    b = -np.sort(-beta, axis=1)
    top = np.full((M, n_top), floor_db)
    n = min(n_top, K)
    with np.errstate(divide="ignore"):
        top[:, :n] = np.maximum(10.0 * np.log10(b[:, :n]), floor_db)
        rest = b[:, n:].sum(axis=1)
        rest_db = np.where(rest > 0, 10.0 * np.log10(np.where(rest > 0, rest, 1.0)), floor_db)
    return np.column_stack([top, np.maximum(rest_db, floor_db)])


@dataclass(frozen=True)
class TrainRecord:
    features: np.ndarray
    target: float


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, targets and the number of scenarios skipped on solver failure."""

    X: np.ndarray
    y: np.ndarray
    n_skipped: int = 0
    scenario_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)

    def records(self) -> Iterator[TrainRecord]:
        for x, t in zip(self.X, self.y):
            yield TrainRecord(x, float(t))

    @classmethod
    def from_records(cls, records: Iterable[TrainRecord]) -> "Dataset":
        recs = list(records)
        if not recs:
            return cls(np.empty((0, 0)), np.empty(0))
        return cls(np.array([r.features for r in recs]), np.array([r.target for r in recs]))


@dataclass(frozen=True)
class ScenarioSpec:
    """One training scenario: sizes, square side ``D`` in m, radio config."""

    M: int
    K: int
    D: float
    cfg: RadioConfig = field(default_factory=RadioConfig)


def _solve_one(spec: ScenarioSpec, seed: int, n_top: int):
    try:
        scn = generate_scenario(spec.M, spec.K, spec.D, spec.cfg, rng=seed)
        stats = compute_stats(scn)
        alloc, _ = maxmin_dl_full(scn, stats)
    except (DlSolverError, ScenarioError, EstimationError) as exc:
        log.warning("scenario skipped: %s", exc)
        return None
    return ap_features(scn.beta, n_top), np.clip(alloc.p, 0.0, 1.0)


def build_dataset(
    scenario_specs: Sequence[ScenarioSpec],
    rng: np.random.Generator | int | None = None,
    n_top: int = 8,
    n_jobs: int = 1,
) -> Dataset:
    """Solve the full downlink max-min problem for each scenario and emit one
    record per AP with target ``p_m = sum_k eta_mk gamma_mk``.

    Scenario seeds and the final shuffle both come from ``rng``.
    """
    rng = np.random.default_rng(rng)
    seeds = rng.integers(0, 2**63 - 1, size=len(scenario_specs))
    results = Parallel(n_jobs=n_jobs)(
        delayed(_solve_one)(spec, int(s), n_top) for spec, s in zip(scenario_specs, seeds)
    )
    X, y, ids = [], [], []
    skipped = 0
    for i, res in enumerate(results):
        if res is None:
            skipped += 1
            continue
        X.append(res[0])
        y.append(res[1])
        ids.append(np.full(len(res[1]), i))
    if not X:
        return Dataset(np.empty((0, n_top + 1)), np.empty(0), skipped, np.empty(0, dtype=int))
    X, y, ids = np.vstack(X), np.concatenate(y), np.concatenate(ids)
    perm = rng.permutation(len(y))
    return Dataset(X[perm], y[perm], skipped, ids[perm])


# --------------------------------------------------------------------------
# network


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * a))
    return a


def _act_deriv(name: str, h: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation output h
    if name == "tanh":
        return 1.0 - h**2
    if name == "sigmoid":
        return h * (1.0 - h)
    return np.ones_like(h)


@dataclass(frozen=True)
class NetSpec:
    hidden: tuple[int, ...] = (20,)
    hidden_activation: str = "tanh"
    output_activation: str = "sigmoid"


@dataclass(frozen=True, eq=False)
class Regressor:
    """Feed-forward network with standardized inputs and a scalar output.

    ``weights[l]`` has shape ``(sizes[l+1], sizes[l])``. The flat parameter
    vector lists each layer's weights in row-major order followed by its
    biases.
    """

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    x_mean: np.ndarray
    x_scale: np.ndarray
    n_top: int = 8
    floor_db: float = FLOOR_DB

    def __post_init__(self):
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need one activation per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.sizes[-1] != 1:
            raise ValueError("output layer must have one unit")

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def with_params(self, w: np.ndarray) -> "Regressor":
        Ws, bs = _unflatten(self.sizes, w)
        return Regressor(self.sizes, self.activations, Ws, bs, self.x_mean, self.x_scale, self.n_top, self.floor_db)

    def raw_output(self, X: np.ndarray) -> np.ndarray:
        """Network output before clamping, for standardized-or-not inputs ``X`` (N, n_in)."""
        return _forward(self, self._standardize(X))[-1][:, 0]

    def _standardize(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} features, got {X.shape[1]}")
        return (X - self.x_mean) / self.x_scale


def _unflatten(sizes, w):
    Ws, bs = [], []
    pos = 0
    for i, o in zip(sizes[:-1], sizes[1:]):
        Ws.append(np.asarray(w[pos : pos + o * i]).reshape(o, i))
        pos += o * i
        bs.append(np.asarray(w[pos : pos + o]))
        pos += o
    if pos != len(w):
        raise ValueError("parameter vector length does not match layer sizes")
    return tuple(Ws), tuple(bs)


def _forward(reg: Regressor, Z: np.ndarray) -> list[np.ndarray]:
    outs = [Z]
    h = Z
    for W, b, act in zip(reg.weights, reg.biases, reg.activations):
        h = _act(act, h @ W.T + b)
        outs.append(h)
    return outs


def jacobian(reg: Regressor, X: np.ndarray) -> np.ndarray:
    """Derivative of the raw output for each sample w.r.t. the flat parameters, ``(N, P)``."""
    outs = _forward(reg, reg._standardize(X))
    N = outs[0].shape[0]
    delta = _act_deriv(reg.activations[-1], outs[-1])  # (N, 1)
    blocks = []
    for layer in range(len(reg.weights) - 1, -1, -1):
        prev = outs[layer]
        blocks.append(np.hstack([(delta[:, :, None] * prev[:, None, :]).reshape(N, -1), delta]))
        if layer > 0:
            delta = (delta @ reg.weights[layer]) * _act_deriv(reg.activations[layer - 1], prev)
    return np.hstack(blocks[::-1])


def init_regressor(
    X: np.ndarray,
    net: NetSpec = NetSpec(),
    rng: np.random.Generator | int | None = None,
    n_top: int = 8,
    floor_db: float = FLOOR_DB,
) -> Regressor:
    """Random weights scaled by ``1/sqrt(fan_in)``; normalization from ``X``."""
    rng = np.random.default_rng(rng)
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    sizes = (X.shape[1], *net.hidden, 1)
    acts = tuple([net.hidden_activation] * len(net.hidden) + [net.output_activation])
    Ws = tuple(rng.standard_normal((o, i)) / np.sqrt(i) for i, o in zip(sizes[:-1], sizes[1:]))
    bs = tuple(np.zeros(o) for o in sizes[1:])
    return Regressor(sizes, acts, Ws, bs, mean, scale, n_top, floor_db)


# --------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass(frozen=True)
class LmParams:
    lam0: float = 1e-3
    lam_inc: float = 10.0
    lam_dec: float = 0.1
    lam_max: float = 1e10
    max_epochs: int = 200
    val_frac: float = 0.1
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if not (self.lam0 > 0 and self.lam_inc > 1 and 0 < self.lam_dec < 1):
            raise ValueError("invalid damping schedule")
        if not 0 <= self.val_frac < 1:
            raise ValueError("val_frac must be in [0, 1)")


@dataclass
class TrainHistory:
    """Per accepted step: training MSE, validation MSE and damping after the step."""

    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    rejected: int = 0
    best_epoch: int = 0
    stop_reason: str = ""


def lm_step(J: np.ndarray, r: np.ndarray, lam: float) -> np.ndarray:
    """Solve ``(J^T J + lam I) dw = -J^T r``."""
    H = J.T @ J
    H[np.diag_indices_from(H)] += lam
    return -cho_solve(cho_factor(H), J.T @ r)


def _mse(reg: Regressor, X, y) -> float:
    return float(np.mean((reg.raw_output(X) - y) ** 2))


def train_lm(
    dataset: Dataset | tuple[np.ndarray, np.ndarray],
    net_spec: NetSpec = NetSpec(),
    lm_params: LmParams = LmParams(),
    return_history: bool = False,
):
    """Fit the network by Levenberg-Marquardt on the squared error.

    A step is accepted iff it lowers the training MSE (then ``lam`` shrinks by
    ``lam_dec``); otherwise ``lam`` grows by ``lam_inc`` and the step is
    recomputed. A fraction ``val_frac`` of the records is held out and the
    weights with the lowest validation MSE are returned; training stops after
    ``patience`` accepted steps without improvement, after ``max_epochs``
    accepted steps, or when ``lam`` exceeds ``lam_max``.
    """
    if isinstance(dataset, Dataset):
        X, y = dataset.X, dataset.y
        n_top = X.shape[1] - 1
    else:
        X, y = (np.asarray(a, dtype=float) for a in dataset)
        n_top = max(X.shape[1] - 1, 0)
    if len(y) == 0:
        raise ValueError("empty dataset")
    p = lm_params
    rng = np.random.default_rng(p.seed)
    perm = rng.permutation(len(y))
    n_val = int(round(p.val_frac * len(y)))
    val, tr = perm[:n_val], perm[n_val:]
    Xt, yt = X[tr], y[tr]
    reg = init_regressor(Xt, net_spec, rng, n_top=n_top)

    hist = TrainHistory()
    lam = p.lam0
    w = reg.params()
    mse = _mse(reg, Xt, yt)
    best_w, best_val = w, _mse(reg, X[val], y[val]) if n_val else mse
    since_best = 0
    for _ in range(p.max_epochs):
        J = jacobian(reg, Xt)
        r = reg.raw_output(Xt) - yt
        accepted = False
        while lam <= p.lam_max:
            try:
                dw = lm_step(J, r, lam)
            except LinAlgError:
                lam *= p.lam_inc
                continue
            cand = reg.with_params(w + dw)
            cand_mse = _mse(cand, Xt, yt)
            if cand_mse < mse:
                accepted = True
                break
            hist.rejected += 1
            lam *= p.lam_inc
        if not accepted:
            if not hist.train_mse and lam > p.lam_max:
                raise LmError("no descent step found before the damping ceiling")
            hist.stop_reason = "damping ceiling"
            break
        reg, w, mse = cand, w + dw, cand_mse
        lam = max(lam * p.lam_dec, 1e-15)
        vmse = _mse(reg, X[val], y[val]) if n_val else mse
        hist.train_mse.append(mse)
        hist.val_mse.append(vmse)
        hist.lam.append(lam)
        if vmse < best_val:
            best_val, best_w, since_best = vmse, w, 0
            hist.best_epoch = len(hist.train_mse)
        else:
            since_best += 1
            if since_best >= p.patience:
                hist.stop_reason = "early stop"
                break
    else:
        hist.stop_reason = "max epochs"
    reg = reg.with_params(best_w)
    return (reg, hist) if return_history else reg


# --------------------------------------------------------------------------
# inference, checks, persistence


def predict(reg: Regressor, f: np.ndarray) -> np.ndarray | float:
    """Clamped prediction for one feature vector (returns float) or a batch."""
    f = np.asarray(f, dtype=float)
    out = np.clip(reg.raw_output(f), 0.0, 1.0)
    return float(out[0]) if f.ndim == 1 else out


def predict_powers(reg: Regressor, beta: np.ndarray) -> np.ndarray:
    """Per-AP powers ``p^NN`` for a whole ``(M, K)`` fading matrix."""
    return predict(reg, ap_features(beta, reg.n_top, reg.floor_db)).reshape(-1)


def jacobian_fd_check(reg: Regressor, sample: np.ndarray, eps: float = 1e-5) -> float:
    """Max discrepancy between the analytic Jacobian and central differences,
    relative to the largest finite-difference entry."""
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    X = np.atleast_2d(np.asarray(sample, dtype=float))
    Ja = jacobian(reg, X)
    w = reg.params()
    Jfd = np.empty_like(Ja)
    for i in range(len(w)):
        e = np.zeros_like(w)
        e[i] = eps
        Jfd[:, i] = (reg.with_params(w + e).raw_output(X) - reg.with_params(w - e).raw_output(X)) / (2 * eps)
    scale = np.max(np.abs(Jfd))
    if scale == 0:
        return float(np.max(np.abs(Ja)))
    return float(np.max(np.abs(Ja - Jfd)) / scale)


def _to_dict(reg: Regressor) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "sizes": list(reg.sizes),
        "activations": list(reg.activations),
        "weights": [W.ravel().tolist() for W in reg.weights],
        "biases": [b.tolist() for b in reg.biases],
        "x_mean": reg.x_mean.tolist(),
        "x_scale": reg.x_scale.tolist(),
        "n_top": reg.n_top,
        "floor_db": reg.floor_db,
    }


def save_regressor(reg: Regressor, path: str | Path) -> None:
    """Write the model as JSON; floats use shortest round-trip repr."""
    Path(path).write_text(json.dumps(_to_dict(reg), indent=1))


def load_regressor(path: str | Path) -> Regressor:
    d = json.loads(Path(path).read_text())
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format {d.get('format_version')!r}")
    sizes = tuple(d["sizes"])
    Ws = tuple(np.array(w, dtype=float).reshape(o, i) for w, i, o in zip(d["weights"], sizes[:-1], sizes[1:]))
    bs = tuple(np.array(b, dtype=float) for b in d["biases"])
    return Regressor(
        sizes,
        tuple(d["activations"]),
        Ws,
        bs,
        np.array(d["x_mean"], dtype=float),
        np.array(d["x_scale"], dtype=float),
        int(d["n_top"]),
        float(d["floor_db"]),
    )
