"""Human-physical microgrid: plant, welfare optimisation and primal-dual control."""

from .model import (
    ControllerGains,
    GridConstants,
    HumanParams,
    LineParams,
    MonitorConfig,
    NodeParams,
    PortMode,
    ScenarioParams,
    SocialCase,
    Topology,
    ValidationError,
    WelfareWeights,
    line_reduction,
    lyapunov_solve,
    social_laplacian,
    steady_grid,
    steady_norms,
    validate,
)
from .scenario import load_scenario, reference_scenario

__version__ = "0.1.0"

__all__ = [
    "ControllerGains",
    "GridConstants",
    "HumanParams",
    "LineParams",
    "MonitorConfig",
    "NodeParams",
    "PortMode",
    "ScenarioParams",
    "SocialCase",
    "Topology",
    "ValidationError",
    "WelfareWeights",
    "line_reduction",
    "load_scenario",
    "lyapunov_solve",
    "reference_scenario",
    "social_laplacian",
    "steady_grid",
    "steady_norms",
    "validate",
]
