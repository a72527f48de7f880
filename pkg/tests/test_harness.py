import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfiot import RadioConfig, compute_stats, draw_channel, generate_scenario
from cfiot.harness import (
    ExperimentError,
    empirical_cdf,
    make_spec,
    mr_receiver_sinr,
    run_experiment,
    side_from_area,
)
from cfiot.harness.cli import main
from cfiot.harness.results import CSV_HEADER, artifact_version
from cfiot.ul_perf import UlPowerAllocation, exact_mmse_sinr

TINY = {
    "ul-rm-accuracy": dict(M=16, K=4, tau=4, D=300.0, n_draws=10, shadow_modes=["iid", "correlated"]),
    "ul-maxmin-compare": dict(M=16, K=4, tau=4, D=200.0, n_draws=10),
    "ul-target-ee": dict(M=16, K=4, tau=4, D=300.0, n_draws=10),
    "dl-nn-area-transfer": dict(
        M=6, K=2, train_areas_km2=[0.01, 0.04], test_areas_km2=[0.02], n_train_per_area=2, hidden=[3], lm_max_epochs=5
    ),
    "dl-density-transfer": dict(
        train_M=6, train_K=2, train_area_km2=0.01, n_train=3, hidden=[3], lm_max_epochs=5, transfer_M=12, transfer_K=4,
        transfer_trials=1,
    ),
    "dl-ee-large": dict(
        M=24, K=8, area_km2=0.01, train_M=6, train_K=2, train_area_km2=0.0025, n_train=3, hidden=[3], lm_max_epochs=5
    ),
}


def _run(exp_id, tmp_path, seed=0, trials=2, **extra):
    spec = make_spec(exp_id, overrides={**TINY[exp_id], **extra}, seed=seed, trials=trials, out=tmp_path)
    return run_experiment(spec)


def test_empirical_cdf_examples():
    x, F = empirical_cdf([5.0])
    assert list(x) == [5.0] and list(F) == [1.0]
    x, F = empirical_cdf([3.0, 1.0, 4.0, 2.0])
    assert F[np.searchsorted(x, 2.5, side="right") - 1] == 0.5
    with pytest.raises(ValueError):
        empirical_cdf([])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_empirical_cdf_properties(values):
    x, F = empirical_cdf(values)
    assert np.all(np.diff(x) > 0) and np.all(np.diff(F) > 0)
    assert F[-1] == 1.0 and F[0] > 0
    x2, F2 = empirical_cdf(values + values)
    np.testing.assert_array_equal(x, x2)
    np.testing.assert_allclose(F, F2)


def test_side_from_area():
    assert side_from_area(0.25) == pytest.approx(500.0)
    assert side_from_area(1.0) == pytest.approx(1000.0)


def test_mr_matches_mmse_for_single_antenna_single_thing():
    for seed in range(5):
        scn = generate_scenario(1, 1, 100.0, RadioConfig(tau=1), rng=seed)
        stats = compute_stats(scn)
        d = draw_channel(scn, stats, np.random.default_rng(seed))
        a = UlPowerAllocation(np.ones(1))
        assert mr_receiver_sinr(d, stats, a, scn.rho_u)[0] == pytest.approx(
            exact_mmse_sinr(d, stats, a, scn.rho_u)[0], rel=1e-10
        )


def test_mmse_dominates_mr():
    scn = generate_scenario(20, 6, 150.0, RadioConfig(tau=3), rng=1)
    stats = compute_stats(scn)
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = draw_channel(scn, stats, rng)
        a = UlPowerAllocation(rng.uniform(0.1, 1, 6))
        assert np.all(exact_mmse_sinr(d, stats, a, scn.rho_u) >= mr_receiver_sinr(d, stats, a, scn.rho_u) * (1 - 1e-10))


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_rm_accuracy_outputs(tmp_path):
    table = _run("ul-rm-accuracy", tmp_path)
    rows = _read_csv(tmp_path / "rates.csv")
    assert tuple(rows[0]) == tuple(CSV_HEADER)
    algs = {r[4] for r in rows[1:]}
    assert {"mmse-exact-iid", "rm-iid", "mmse-exact-correlated", "rm-correlated"} <= algs
    assert len(rows) - 1 == 2 * 2 * 2 * 4
    cdf = _read_csv(tmp_path / "cdf.csv")
    by_alg = {}
    for alg, x, F in (r[:3] for r in cdf[1:]):
        by_alg.setdefault(alg, []).append((float(x), float(F)))
    for pts in by_alg.values():
        F = [f for _, f in pts]
        assert all(b >= a for a, b in zip(F, F[1:])) and F[-1] == pytest.approx(1.0)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert "median_rel_err_iid" in summary["metrics"]
    assert summary["version"] == artifact_version()
    config = json.loads((tmp_path / "config.json").read_text())
    assert config["params"]["M"] == 16 and config["seed"] == 0
    for r in rows[1:]:
        assert float(r[2]) >= 0 and float(r[3]) >= 0
    assert set(table.algorithms) == algs


def test_same_seed_same_bytes(tmp_path):
    _run("ul-maxmin-compare", tmp_path / "a", seed=5)
    _run("ul-maxmin-compare", tmp_path / "b", seed=5)
    _run("ul-maxmin-compare", tmp_path / "c", seed=6)
    a = (tmp_path / "a" / "rates.csv").read_bytes()
    assert a == (tmp_path / "b" / "rates.csv").read_bytes()
    assert a != (tmp_path / "c" / "rates.csv").read_bytes()


def test_target_ee_metrics(tmp_path):
    table = _run("ul-target-ee", tmp_path)
    assert {"mmse-full", "mmse-target", "rm-target"} <= set(table.algorithms)
    assert table.metrics["ee_ratio_mean"] > 0


@pytest.mark.parametrize("exp_id", ["dl-nn-area-transfer", "dl-density-transfer", "dl-ee-large"])
def test_downlink_pipelines_run(exp_id, tmp_path):
    table = _run(exp_id, tmp_path, trials=1)
    assert (tmp_path / "model.json").exists()
    assert (tmp_path / "rates.csv").exists()
    assert len(table.rates(table.algorithms[0])) > 0
    if exp_id == "dl-density-transfer":
        assert "speedup_opt_over_nn_reduced" in table.metrics
        assert "p_abs_err_mean" in table.metrics
    if exp_id == "dl-ee-large":
        assert table.metrics["ee_ratio_nn_over_full"] > 0


def test_config_errors_are_stage_tagged():
    with pytest.raises(ExperimentError) as exc:
        make_spec("ul-rm-accuracy", overrides={"Mx": 3})
    assert exc.value.stage == "config"
    with pytest.raises(ExperimentError):
        make_spec("nope")
    with pytest.raises(ExperimentError):
        make_spec("ul-rm-accuracy", trials=0)
    spec = make_spec("ul-maxmin-compare", overrides={**TINY["ul-maxmin-compare"], "radio": {"tua": 1}}, trials=1)
    with pytest.raises(ExperimentError) as exc:
        run_experiment(spec)
    assert exc.value.stage == "config"


def test_runtime_errors_carry_stage():
    spec = make_spec("ul-rm-accuracy", overrides={**TINY["ul-rm-accuracy"], "radio": {"sigma_sh": -1.0}}, trials=1)
    with pytest.raises(ExperimentError) as exc:
        run_experiment(spec)
    assert exc.value.stage == "config"


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["list"]) == 0
    assert "ul-rm-accuracy" in capsys.readouterr().out
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY["ul-target-ee"]))
    assert main(["ul-target-ee", "--config", str(cfg), "--trials", "1", "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "summary.json").exists()
    capsys.readouterr()
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["ul-target-ee", "--config", str(cfg)]) != 0
    assert "error [config]" in capsys.readouterr().err
    cfg.write_text("{not json")
    assert main(["ul-target-ee", "--config", str(cfg)]) != 0
    with pytest.raises(SystemExit):
        main(["ul-target-ee", "--preset", "huge"])


def test_cli_scenario_dump(tmp_path, capsys):
    out = tmp_path / "scn.json"
    assert main(["scenario", "--M", "4", "--K", "2", "--D", "100", "--seed", "3", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert np.array(doc["beta_db"]).shape == (4, 2)
    assert main(["scenario", "--M", "4", "--out", str(out)]) == 2
    assert "error [scenario]" in capsys.readouterr().err
