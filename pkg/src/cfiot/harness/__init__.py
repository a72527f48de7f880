"""Experiment runner, uplink MR baseline, CDFs and the command-line interface."""

from .experiments import (
    EXPERIMENTS,
    PRESETS,
    ExperimentError,
    ExperimentSpec,
    make_spec,
    mr_receiver_sinr,
    run_experiment,
    side_from_area,
)
from .results import ResultTable, artifact_version, empirical_cdf, ks_distance

__all__ = [
    "EXPERIMENTS",
    "PRESETS",
    "ExperimentError",
    "ExperimentSpec",
    "ResultTable",
    "artifact_version",
    "empirical_cdf",
    "ks_distance",
    "make_spec",
    "mr_receiver_sinr",
    "run_experiment",
    "side_from_area",
]
