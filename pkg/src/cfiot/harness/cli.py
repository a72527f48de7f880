"""Command-line entry point: ``cfiot <experiment> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..netgen import ScenarioError, dump_scenario, generate_scenario, load_config, RadioConfig
from .experiments import PRESETS, ExperimentError, make_spec, run_experiment


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of parameter overrides")
    p.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    p.add_argument("--trials", type=int, help="number of trials (overrides the preset)")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--jobs", type=int, default=None, help="parallel worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfiot", description="Cell-free massive MIMO IoT experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for exp_id in PRESETS:
        _add_run_args(sub.add_parser(exp_id, help=f"run the {exp_id} experiment"))
    sc = sub.add_parser("scenario", help="generate one scenario and dump it as JSON")
    sc.add_argument("--config", type=Path, help="JSON radio config (may hold M, K, D, seed)")
    sc.add_argument("--M", type=int)
    sc.add_argument("--K", type=int)
    sc.add_argument("--D", type=float)
    sc.add_argument("--seed", type=int)
    sc.add_argument("--out", type=Path, required=True)
    sub.add_parser("list", help="list experiments and their presets")
    return parser


def _run_scenario(args) -> int:
    try:
        cfg, scn_args = load_config(args.config) if args.config else (RadioConfig(), {})
        M = args.M if args.M is not None else scn_args.get("M")
        K = args.K if args.K is not None else scn_args.get("K")
        D = args.D if args.D is not None else scn_args.get("D")
        seed = args.seed if args.seed is not None else scn_args.get("seed", 0)
        if None in (M, K, D):
            raise ScenarioError("M, K and D are required")
        dump_scenario(generate_scenario(int(M), int(K), float(D), cfg, rng=int(seed)), args.out)
    except (ScenarioError, OSError, json.JSONDecodeError) as exc:
        print(f"cfiot: error [scenario]: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.command == "list":
        for exp_id, presets in PRESETS.items():
            print(f"{exp_id}: {', '.join(presets)}")
        return 0
    if args.command == "scenario":
        return _run_scenario(args)
    try:
        overrides = {}
        if args.config:
            try:
                overrides = json.loads(args.config.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ExperimentError("config", str(exc)) from exc
            if not isinstance(overrides, dict):
                raise ExperimentError("config", "config file must hold a JSON object")
        if args.jobs is not None:
            overrides["n_jobs"] = args.jobs
        spec = make_spec(args.command, args.preset, overrides, args.seed, args.trials, args.out)
        table = run_experiment(spec)
    except ExperimentError as exc:
        print(f"cfiot: error [{exc.stage}]: {exc}", file=sys.stderr)
        return 2
    summary = {k: v for k, v in table.metrics.items() if not isinstance(v, list)}
    print(json.dumps(summary, indent=2, default=str))
    if spec.out is not None:
        print(f"results written to {spec.out}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
