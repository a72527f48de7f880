"""Result tables, empirical CDFs and persistence."""

from __future__ import annotations

import csv
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import ks_2samp

from .. import __version__

__all__ = ["ResultTable", "empirical_cdf", "ks_distance", "artifact_version", "CSV_HEADER"]

CSV_HEADER = ("thing_id", "trial", "rate_bps", "rate_se", "algorithm")


def empirical_cdf(values) -> tuple[np.ndarray, np.ndarray]:
    """Right-continuous step CDF on the sorted unique values.

    Returns ``(x, F)`` with ``F[i] = P(X <= x[i])``.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("empirical_cdf needs at least one value")
    x, counts = np.unique(v, return_counts=True)
    return x, np.cumsum(counts) / v.size


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    return float(ks_2samp(np.asarray(a).ravel(), np.asarray(b).ravel()).statistic)


def artifact_version() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        desc = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else __version__


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class ResultTable:
    """Per-thing rates of every algorithm and trial, plus scalar summaries.

    ``metrics`` holds experiment-specific scalars (accuracy measures,
    convergence counters), ``ee`` energy efficiencies and ``timings``
    wall-clock seconds per solver.
    """

    experiment: str
    thing_id: list = field(default_factory=list)
    trial: list = field(default_factory=list)
    rate_se: list = field(default_factory=list)
    rate_bps: list = field(default_factory=list)
    algorithm: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    ee: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    version: str = field(default_factory=artifact_version)

    def add_rates(self, trial: int, algorithm: str, rate_se, factor: float) -> None:
        rate_se = np.asarray(rate_se, dtype=float)
        n = rate_se.size
        self.thing_id.extend(range(n))
        self.trial.extend([trial] * n)
        self.rate_se.extend(rate_se.tolist())
        self.rate_bps.extend((factor * rate_se).tolist())
        self.algorithm.extend([algorithm] * n)

    @property
    def algorithms(self) -> list[str]:
        return list(dict.fromkeys(self.algorithm))

    def rates(self, algorithm: str, unit: str = "se") -> np.ndarray:
        src = self.rate_se if unit == "se" else self.rate_bps
        return np.array([r for r, a in zip(src, self.algorithm) if a == algorithm])

    def cdf(self, algorithm: str, unit: str = "se"):
        return empirical_cdf(self.rates(algorithm, unit))

    def write(self, out_dir: str | Path) -> Path:
        """Write ``rates.csv``, ``cdf.csv``, ``summary.json`` and ``config.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "rates.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for row in zip(self.thing_id, self.trial, self.rate_bps, self.rate_se, self.algorithm):
                w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3])), row[4]])
        with open(out / "cdf.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("algorithm", "rate_se", "cdf"))
            for alg in self.algorithms:
                x, F = self.cdf(alg)
                for xi, Fi in zip(x, F):
                    w.writerow([alg, repr(float(xi)), repr(float(Fi))])
        summary = {
            "experiment": self.experiment,
            "version": self.version,
            "metrics": self.metrics,
            "energy_efficiency": self.ee,
            "timings_s": self.timings,
            "config": self.config,
        }
        (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True))
        (out / "config.json").write_text(json.dumps(_jsonable(self.config), indent=2, sort_keys=True))
        return out
