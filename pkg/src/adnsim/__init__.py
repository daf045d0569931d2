"""RMS simulation and fault ride-through survivability of active distribution networks."""

__version__ = "0.1.0"

from .network import FaultSpec, Grid, LoadModel, assemble_ybus, cigre12, load_grid  # noqa: E402
from .powerflow import solve_power_flow, transformer_mv_flow  # noqa: E402
from .dynamics import Scenario, Simulation, Trajectory, load_scenario, simulate  # noqa: E402
from .survival import check_survival, evaluate_limiting_curve, load_curve  # noqa: E402
from .montecarlo import envelope_study, single_node_survivability  # noqa: E402

__all__ = [
    "FaultSpec", "Grid", "LoadModel", "Scenario", "Simulation", "Trajectory", "__version__", "assemble_ybus",
    "check_survival", "cigre12", "envelope_study", "evaluate_limiting_curve", "load_curve", "load_grid",
    "load_scenario", "simulate", "single_node_survivability", "solve_power_flow", "transformer_mv_flow",
]
