"""Experiment registry and runners.

Every experiment draws its scenarios from per-trial child seeds of one
``SeedSequence``, so results are reproducible for a given (spec, seed).
"""

from __future__ import annotations

import copy
import dataclasses
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
from joblib import Parallel, delayed

from ..dl_power import (
    DlPowerAllocation,
    dl_rate_and_ee,
    dl_sinr_closed_form,
    maxmin_dl_full,
    maxmin_dl_given_p,
    uniform_power,
)
from ..estimation import ChannelDraw, EstimationStats, compute_stats, draw_channels
from ..netgen import RadioConfig, ScenarioError, generate_scenario
from ..regressor import (
    LmParams,
    NetSpec,
    Regressor,
    ScenarioSpec,
    build_dataset,
    load_regressor,
    predict_powers,
    save_regressor,
    train_lm,
)
from ..ul_perf import (
    UlPowerAllocation,
    combiner_sinr,
    exact_mmse_sinr,
    rm_fixed_point,
    rm_sinr,
    throughput_factor,
)
from ..ul_power import maxmin_exact, maxmin_rm, target_rate_rm, ul_energy_efficiency
from .results import ResultTable, ks_distance

__all__ = [
    "EXPERIMENTS",
    "PRESETS",
    "ExperimentError",
    "ExperimentSpec",
    "make_spec",
    "mr_receiver_sinr",
    "run_experiment",
    "side_from_area",
]


class ExperimentError(RuntimeError):
    """Failure inside an experiment, tagged with the pipeline stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage
        self.message = message


@contextmanager
def _stage(name: str):
    try:
        yield
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(name, f"{type(exc).__name__}: {exc}") from exc


def mr_receiver_sinr(
    draw: ChannelDraw | np.ndarray,
    stats: EstimationStats,
    alloc: UlPowerAllocation,
    rho_u: float,
) -> np.ndarray:
    """Uplink SINR of the maximum-ratio receiver ``v_k = ghat_k``."""
    G_hat = draw.G_hat if isinstance(draw, ChannelDraw) else np.asarray(draw)
    return combiner_sinr(G_hat, G_hat, stats, alloc, rho_u)


def side_from_area(area_km2: float) -> float:
    """Side in m of a square with the given area in km^2."""
    return float(np.sqrt(area_km2) * 1e3)


# --------------------------------------------------------------------------
# presets

_DL_TRAIN = dict(train_M=64, train_K=16, train_area_km2=0.03, n_train=79, n_top=8, hidden=[20], lm_max_epochs=200)

PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "ul-rm-accuracy": {
        "desk": dict(M=256, K=32, tau=32, D=500.0, trials=20, n_draws=200, shadow_modes=["iid", "correlated"]),
        "paper": dict(M=1024, K=256, tau=256, D=1000.0, trials=20, n_draws=200, shadow_modes=["iid", "correlated"]),
    },
    "ul-maxmin-compare": {
        "desk": dict(M=128, K=40, tau=60, D=100.0, trials=10, n_draws=100, shadow_modes=["iid"], alg1_method="sinr"),
        "paper": dict(M=128, K=40, tau=60, D=100.0, trials=100, n_draws=200, shadow_modes=["iid"], alg1_method="direct"),
    },
    "ul-target-ee": {
        "desk": dict(M=160, K=40, tau=40, D=1000.0, trials=10, n_draws=100, target_percentile=10.0, u_g=1.0, u_p=0.1),
        "paper": dict(M=160, K=40, tau=40, D=1000.0, trials=50, n_draws=200, target_percentile=10.0, u_g=1.0, u_p=0.1),
    },
    "dl-nn-area-transfer": {
        "desk": dict(
            M=32,
            K=4,
            train_areas_km2=[0.016, 0.063, 0.25, 0.56, 1.0, 4.0],
            test_areas_km2=[0.72, 2.25],
            n_train_per_area=5,
            trials=5,
            n_top=8,
            hidden=[20],
            lm_max_epochs=200,
        ),
        "paper": dict(
            M=128,
            K=4,
            train_areas_km2=[0.016, 0.063, 0.25, 0.56, 1.0, 4.0],
            test_areas_km2=[0.72, 2.25],
            n_train_per_area=13,
            trials=20,
            n_top=8,
            hidden=[20],
            lm_max_epochs=200,
        ),
    },
    "dl-density-transfer": {
        "desk": dict(
            **_DL_TRAIN,
            trials=10,
            transfer_M=256,
            transfer_K=64,
            transfer_trials=3,
        ),
        "paper": dict(
            **{**_DL_TRAIN, "n_train": 160},
            trials=50,
            transfer_M=1024,
            transfer_K=256,
            transfer_trials=5,
        ),
    },
    "dl-ee-large": {
        "desk": dict(M=1024, K=256, area_km2=0.5, trials=1, model=None, **_DL_TRAIN),
        "paper": dict(M=4096, K=1024, area_km2=2.0, trials=1, model=None, **_DL_TRAIN),
    },
}

_COMMON_KEYS = {"radio", "n_jobs", "tau", "tau_c"}


@dataclass(frozen=True)
class ExperimentSpec:
    """Registry id, resolved parameters, seed and optional output directory."""

    id: str
    params: dict
    seed: int = 0
    out: Path | None = None
    preset: str = "desk"

    def __post_init__(self):
        if self.id not in EXPERIMENTS:
            raise ExperimentError("config", f"unknown experiment {self.id!r}")
        if int(self.params.get("trials", 1)) < 1:
            raise ExperimentError("config", "trial count must be at least 1")


def make_spec(
    exp_id: str,
    preset: str = "desk",
    overrides: dict | None = None,
    seed: int = 0,
    trials: int | None = None,
    out: str | Path | None = None,
) -> ExperimentSpec:
    """Resolve preset parameters with user overrides into a spec."""
    if exp_id not in PRESETS:
        raise ExperimentError("config", f"unknown experiment {exp_id!r}; choose from {sorted(PRESETS)}")
    if preset not in PRESETS[exp_id]:
        raise ExperimentError("config", f"unknown preset {preset!r}")
    params = copy.deepcopy(PRESETS[exp_id][preset])
    for key, val in (overrides or {}).items():
        if key not in params and key not in _COMMON_KEYS:
            raise ExperimentError("config", f"unknown parameter {key!r} for {exp_id}")
        params[key] = val
    if trials is not None:
        params["trials"] = int(trials)
    return ExperimentSpec(exp_id, params, int(seed), Path(out) if out is not None else None, preset)


def _radio(p: dict, K: int | None = None, **extra) -> RadioConfig:
    radio = dict(p.get("radio") or {})
    tau = p.get("tau")
    if tau is None:
        # Downlink experiments fix no pilot length: default length, or one
        # pilot symbol per thing for large K.
        tau = max(RadioConfig.tau, K or 0)
    radio.setdefault("tau", int(tau))
    radio.setdefault("tau_c", int(p.get("tau_c") or max(RadioConfig.tau_c, 2 * radio["tau"])))
    radio.update(extra)
    fields = {f.name for f in dataclasses.fields(RadioConfig)}
    unknown = set(radio) - fields
    if unknown:
        raise ExperimentError("config", f"unknown radio keys {sorted(unknown)}")
    try:
        return RadioConfig(**radio)
    except ScenarioError as exc:
        raise ExperimentError("config", str(exc)) from exc


def _parallel(p: dict, fn: Callable, args: list) -> list:
    n_jobs = int(p.get("n_jobs", 1))
    return Parallel(n_jobs=n_jobs)(delayed(fn)(*a) for a in args)


# --------------------------------------------------------------------------
# uplink


def _ergodic_rates(G_hats: np.ndarray, stats, alloc, rho_u, sinr_fn=exact_mmse_sinr) -> np.ndarray:
    return np.mean([np.log2(1.0 + sinr_fn(G, stats, alloc, rho_u)) for G in G_hats], axis=0)


def _ul_rm_trial(p, cfg, ss):
    rng = np.random.default_rng(ss)
    scn = generate_scenario(p["M"], p["K"], p["D"], cfg, rng)
    stats = compute_stats(scn)
    full = UlPowerAllocation.full(scn.K)
    t0 = time.perf_counter()
    state = rm_fixed_point(stats, full, scn.rho_u)
    rm = np.log2(1.0 + rm_sinr(state, stats, full, scn.rho_u))
    t1 = time.perf_counter()
    _, G_hats, _ = draw_channels(scn, stats, p["n_draws"], rng)
    exact = _ergodic_rates(G_hats, stats, full, scn.rho_u)
    t2 = time.perf_counter()
    return dict(
        rates={"mmse-exact": exact, "rm": rm},
        metrics={"rm_iterations": state.iterations},
        timings={"rm": t1 - t0, "monte_carlo": t2 - t1},
    )


def _run_ul_rm_accuracy(spec, seqs, table):
    p = spec.params
    for mode in p["shadow_modes"]:
        cfg = _radio(p, shadow_mode=mode)
        with _stage("solve"):
            outs = _parallel(p, _ul_rm_trial, [(p, cfg, s) for s in seqs])
        _collect(table, outs, cfg, suffix=f"-{mode}")
        with _stage("aggregate"):
            ex = table.rates(f"mmse-exact-{mode}")
            rm = table.rates(f"rm-{mode}")
            table.metrics[f"median_rel_err_{mode}"] = float(np.median(np.abs(rm - ex) / ex))
            table.metrics[f"ks_{mode}"] = ks_distance(rm, ex)


def _ul_compare_trial(p, cfg, ss):
    rng = np.random.default_rng(ss)
    scn = generate_scenario(p["M"], p["K"], p["D"], cfg, rng)
    stats = compute_stats(scn)
    K, rho = scn.K, scn.rho_u
    full = UlPowerAllocation.full(K)
    _, G_hats, _ = draw_channels(scn, stats, p["n_draws"], rng)

    t0 = time.perf_counter()
    alg2 = maxmin_rm(stats, rho_u=rho)
    t1 = time.perf_counter()
    alloc2 = UlPowerAllocation(alg2.eta)
    state2 = rm_fixed_point(stats, alloc2, rho)

    r_full, r_mr, r_alg1, r_alg2 = [], [], [], []
    alg1_iters, alg1_fail, t_alg1 = [], 0, 0.0
    for G in G_hats:
        r_full.append(np.log2(1.0 + exact_mmse_sinr(G, stats, full, rho)))
        r_mr.append(np.log2(1.0 + mr_receiver_sinr(G, stats, full, rho)))
        r_alg2.append(np.log2(1.0 + exact_mmse_sinr(G, stats, alloc2, rho)))
        s = time.perf_counter()
        res = maxmin_exact(G, stats, rho_u=rho, method=p.get("alg1_method", "sinr"))
        t_alg1 += time.perf_counter() - s
        alg1_iters.append(res.iterations)
        alg1_fail += not res.converged
        r_alg1.append(np.log2(1.0 + exact_mmse_sinr(G, stats, UlPowerAllocation(res.eta), rho)))
    return dict(
        rates={
            "mmse-full": np.mean(r_full, axis=0),
            "mr-full": np.mean(r_mr, axis=0),
            "mmse-maxmin-exact": np.mean(r_alg1, axis=0),
            "mmse-maxmin-rm": np.mean(r_alg2, axis=0),
            "rm-maxmin-rm": np.log2(1.0 + rm_sinr(state2, stats, alloc2, rho)),
        },
        metrics={
            "alg1_max_iterations": max(alg1_iters),
            "alg1_not_converged": alg1_fail,
            "alg2_iterations": alg2.iterations,
            "alg2_converged": alg2.converged,
        },
        timings={"maxmin_exact_total": t_alg1, "maxmin_rm": t1 - t0},
    )


def _run_ul_maxmin_compare(spec, seqs, table):
    p = spec.params
    if p.get("subopt"):
        raise ExperimentError("config", "the sub-optimal estimation arm is not implemented")
    for mode in p["shadow_modes"]:
        cfg = _radio(p, shadow_mode=mode)
        with _stage("solve"):
            outs = _parallel(p, _ul_compare_trial, [(p, cfg, s) for s in seqs])
        suffix = f"-{mode}" if len(p["shadow_modes"]) > 1 else ""
        _collect(table, outs, cfg, suffix=suffix)
        with _stage("aggregate"):
            out5 = {a: float(np.percentile(table.rates(a), 5)) for a in table.algorithms if a.endswith(suffix)}
            table.metrics[f"outage5{suffix}"] = out5
            table.metrics[f"mmse_over_mr_outage5{suffix}"] = out5[f"mmse-full{suffix}"] / out5[f"mr-full{suffix}"]


def _ul_target_trial(p, cfg, ss):
    rng = np.random.default_rng(ss)
    scn = generate_scenario(p["M"], p["K"], p["D"], cfg, rng)
    stats = compute_stats(scn)
    K, rho = scn.K, scn.rho_u
    full = UlPowerAllocation.full(K)
    _, G_hats, _ = draw_channels(scn, stats, p["n_draws"], rng)
    r_full = _ergodic_rates(G_hats, stats, full, rho)
    R_t = float(np.percentile(r_full, p["target_percentile"]))
    S_t = 2.0**R_t - 1.0
    t0 = time.perf_counter()
    res = target_rate_rm(stats, rho_u=rho, S_t=S_t, u_g=p["u_g"], u_p=p["u_p"])
    t1 = time.perf_counter()
    alloc = UlPowerAllocation(res.eta)
    r_tgt = _ergodic_rates(G_hats, stats, alloc, rho)
    state = rm_fixed_point(stats, alloc, rho)
    r_rm = np.log2(1.0 + rm_sinr(state, stats, alloc, rho))

    factor = throughput_factor(cfg)
    P_w = cfg.P_u / 1e3
    ee_full = ul_energy_efficiency(factor * r_full, np.ones(K), P_w)
    ee_tgt = ul_energy_efficiency(factor * r_tgt, res.eta, P_w)
    per_thing = (r_tgt / np.maximum(res.eta, 1e-300)) / r_full
    return dict(
        rates={"mmse-full": r_full, "mmse-target": r_tgt, "rm-target": r_rm},
        metrics={
            "phase": res.phase,
            "converged": res.converged,
            "unmet": len(res.unmet),
            "target_rate_se": R_t,
            "per_thing_ee_gain_max": float(per_thing.max()),
            "per_thing_ee_gain_median": float(np.median(per_thing)),
        },
        ee={"full": ee_full, "target": ee_tgt, "ratio": ee_tgt / ee_full},
        timings={"target_rate_rm": t1 - t0},
    )


def _run_ul_target_ee(spec, seqs, table):
    p = spec.params
    cfg = _radio(p)
    with _stage("solve"):
        outs = _parallel(p, _ul_target_trial, [(p, cfg, s) for s in seqs])
    _collect(table, outs, cfg)
    with _stage("aggregate"):
        ratios = np.array(table.ee["ratio"])
        table.metrics["ee_ratio_mean"] = float(ratios.mean())
        table.metrics["ee_ratio_min"] = float(ratios.min())


# --------------------------------------------------------------------------
# downlink


def _train_regressor(p, specs, ss) -> tuple[Regressor, dict]:
    rng = np.random.default_rng(ss)
    t0 = time.perf_counter()
    with _stage("dataset"):
        data = build_dataset(specs, rng, n_top=int(p["n_top"]), n_jobs=int(p.get("n_jobs", 1)))
    if len(data) == 0:
        raise ExperimentError("dataset", "every training scenario failed")
    t1 = time.perf_counter()
    with _stage("train"):
        seed = int(np.random.default_rng(ss).integers(2**31))
        reg, hist = train_lm(
            data,
            NetSpec(hidden=tuple(p["hidden"])),
            LmParams(max_epochs=int(p["lm_max_epochs"]), seed=seed),
            return_history=True,
        )
    t2 = time.perf_counter()
    info = {
        "records": len(data),
        "skipped_scenarios": data.n_skipped,
        "epochs": len(hist.train_mse),
        "stop_reason": hist.stop_reason,
        "val_mse": hist.val_mse[hist.best_epoch - 1] if hist.best_epoch else None,
        "dataset_s": t1 - t0,
        "train_s": t2 - t1,
    }
    return reg, info


def _dl_eval_trial(p, cfg, M, K, D, reg, arms, ss):
    rng = np.random.default_rng(ss)
    scn = generate_scenario(M, K, D, cfg, rng)
    stats = compute_stats(scn)
    allocs: dict[str, DlPowerAllocation] = {}
    timings, metrics = {}, {}
    if "opt" in arms or "uniform-opt" in arms:
        t0 = time.perf_counter()
        allocs["opt"], _ = maxmin_dl_full(scn, stats)
        timings["opt"] = time.perf_counter() - t0
        metrics["opt_probes"] = len(allocs["opt"].info.get("trace", []))
    if any(a in arms for a in ("uniform-nn", "nn-reduced")):
        t0 = time.perf_counter()
        p_nn = predict_powers(reg, scn.beta)
        t1 = time.perf_counter()
        allocs["uniform-nn"] = uniform_power(stats, p_nn)
        t2 = time.perf_counter()
        timings["uniform_nn"] = t2 - t0
        if "nn-reduced" in arms:
            allocs["nn-reduced"] = maxmin_dl_given_p(scn, stats, p_nn)
            timings["nn_reduced"] = (t1 - t0) + (time.perf_counter() - t2)
        if "opt" in allocs:
            metrics["p_abs_err"] = float(np.mean(np.abs(p_nn - allocs["opt"].p)))
    if "uniform-opt" in arms:
        allocs["uniform-opt"] = uniform_power(stats, allocs["opt"].p)
    if "uniform-full" in arms:
        allocs["uniform-full"] = uniform_power(stats, np.ones(M))

    rates, ee = {}, {}
    for arm in arms:
        sinr = dl_sinr_closed_form(scn, stats, allocs[arm])
        rates[arm], ee[arm] = dl_rate_and_ee(sinr, allocs[arm].p, cfg.P_d, cfg)
    return dict(rates=rates, metrics=metrics, ee=ee, timings=timings)


def _dl_eval(p, table, reg, M, K, area, arms, seqs, label=""):
    D = side_from_area(area)
    cfg = _radio(p, K=K)
    with _stage("solve"):
        outs = _parallel(p, _dl_eval_trial, [(p, cfg, M, K, D, reg, arms, s) for s in seqs])
    _collect(table, outs, cfg, suffix=label)
    return outs


def _run_dl_area_transfer(spec, seqs, table, train_ss):
    p = spec.params
    M, K = p["M"], p["K"]
    specs = [
        ScenarioSpec(M, K, side_from_area(a), _radio(p, K=K))
        for a in p["train_areas_km2"]
        for _ in range(int(p["n_train_per_area"]))
    ]
    reg, info = _train_regressor(p, specs, train_ss)
    table.metrics["training"] = info
    arms = ["opt", "nn-reduced", "uniform-nn"]
    for area in p["test_areas_km2"]:
        label = f"@{area:g}km2"
        _dl_eval(p, table, reg, M, K, area, arms, seqs, label)
        with _stage("aggregate"):
            opt = np.median(table.rates(f"opt{label}"))
            nn = np.median(table.rates(f"nn-reduced{label}"))
            table.metrics[f"median_rate_nn_over_opt{label}"] = float(nn / opt)
    _maybe_save_model(spec, reg)


def _run_dl_density_transfer(spec, seqs, table, train_ss):
    p = spec.params
    M, K, area = p["train_M"], p["train_K"], p["train_area_km2"]
    D = side_from_area(area)
    specs = [ScenarioSpec(M, K, D, _radio(p, K=K))] * int(p["n_train"])
    reg, info = _train_regressor(p, specs, train_ss)
    table.metrics["training"] = info
    arms = ["opt", "uniform-opt", "uniform-nn", "uniform-full", "nn-reduced"]
    outs = _dl_eval(p, table, reg, M, K, area, arms, seqs)
    with _stage("aggregate"):
        t_opt = np.array([o["timings"]["opt"] for o in outs])
        t_nn = np.array([o["timings"]["nn_reduced"] for o in outs])
        table.metrics["speedup_opt_over_nn_reduced"] = float(t_opt.sum() / t_nn.sum())
        table.metrics["median_rate_uniform_nn_over_uniform_opt"] = float(
            np.median(table.rates("uniform-nn")) / np.median(table.rates("uniform-opt"))
        )
        table.metrics["p_abs_err_mean"] = float(np.mean([o["metrics"]["p_abs_err"] for o in outs]))
    n_tr = int(p.get("transfer_trials", 0))
    if n_tr > 0:
        M2, K2 = p["transfer_M"], p["transfer_K"]
        area2 = area * M2 / M
        seqs2 = np.random.SeedSequence(spec.seed).spawn(3)[2].spawn(n_tr)
        label = f"@M{M2}"
        _dl_eval(p, table, reg, M2, K2, area2, ["uniform-nn", "uniform-full"], seqs2, label)
        with _stage("aggregate"):
            table.metrics[f"ee_ratio_nn_over_full{label}"] = float(
                np.mean(table.ee[f"uniform-nn{label}"]) / np.mean(table.ee[f"uniform-full{label}"])
            )
    _maybe_save_model(spec, reg)


def _run_dl_ee_large(spec, seqs, table, train_ss):
    p = spec.params
    if p.get("model"):
        with _stage("config"):
            reg = load_regressor(p["model"])
        table.metrics["training"] = {"model": str(p["model"])}
    else:
        D = side_from_area(p["train_area_km2"])
        specs = [ScenarioSpec(p["train_M"], p["train_K"], D, _radio(p, K=p["train_K"]))] * int(p["n_train"])
        reg, info = _train_regressor(p, specs, train_ss)
        table.metrics["training"] = info
    _dl_eval(p, table, reg, p["M"], p["K"], p["area_km2"], ["uniform-nn", "uniform-full"], seqs)
    with _stage("aggregate"):
        nn = float(np.mean(table.ee["uniform-nn"]))
        full = float(np.mean(table.ee["uniform-full"]))
        table.metrics["ee_ratio_nn_over_full"] = nn / full
    _maybe_save_model(spec, reg)


def _maybe_save_model(spec, reg):
    if spec.out is not None:
        with _stage("write"):
            Path(spec.out).mkdir(parents=True, exist_ok=True)
            save_regressor(reg, Path(spec.out) / "model.json")


# --------------------------------------------------------------------------


def _collect(table: ResultTable, outs: list, cfg: RadioConfig, suffix: str = "") -> None:
    factor = throughput_factor(cfg)
    for trial, out in enumerate(outs):
        for alg, r in out["rates"].items():
            table.add_rates(trial, alg + suffix, r, factor)
        for k, v in out.get("metrics", {}).items():
            table.metrics.setdefault(k + suffix, []).append(v)
        for k, v in out.get("ee", {}).items():
            table.ee.setdefault(k + suffix, []).append(v)
        for k, v in out.get("timings", {}).items():
            table.timings.setdefault(k + suffix, []).append(v)


EXPERIMENTS: dict[str, Callable] = {
    "ul-rm-accuracy": _run_ul_rm_accuracy,
    "ul-maxmin-compare": _run_ul_maxmin_compare,
    "ul-target-ee": _run_ul_target_ee,
    "dl-nn-area-transfer": _run_dl_area_transfer,
    "dl-density-transfer": _run_dl_density_transfer,
    "dl-ee-large": _run_dl_ee_large,
}


def run_experiment(spec: ExperimentSpec) -> ResultTable:
    """Run one registered experiment and write its files when ``spec.out`` is set.

    Raises
    ------
    ExperimentError
        Tagged with the stage that failed.
    """
    table = ResultTable(spec.id)
    table.config = {"id": spec.id, "preset": spec.preset, "seed": spec.seed, "params": spec.params}
    root = np.random.SeedSequence(spec.seed)
    eval_ss, train_ss = root.spawn(2)
    seqs = eval_ss.spawn(int(spec.params["trials"]))
    t0 = time.perf_counter()
    runner = EXPERIMENTS[spec.id]
    if spec.id.startswith("dl-"):
        runner(spec, seqs, table, train_ss)
    else:
        runner(spec, seqs, table)
    table.timings["total"] = time.perf_counter() - t0
    if spec.out is not None:
        with _stage("write"):
            table.write(spec.out)
    return table
