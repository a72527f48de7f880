"""Cell-free massive MIMO IoT simulation: channel estimation, uplink MMSE
and random-matrix SINR, uplink/downlink power control, and a small
Levenberg-Marquardt regressor for downlink power prediction."""

from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

from .netgen import RadioConfig, Scenario, ScenarioError, generate_scenario
from .estimation import EstimationStats, compute_stats, draw_channel, draw_channels

__all__ = [
    "__version__",
    "RadioConfig",
    "Scenario",
    "ScenarioError",
    "generate_scenario",
    "EstimationStats",
    "compute_stats",
    "draw_channel",
    "draw_channels",
]
